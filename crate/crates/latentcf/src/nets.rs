//! Trainable models: an MLP classifier, a VAE supplying the encoder and
//! generator, and the Adam optimizer. Training is single-threaded and fully
//! determined by the seed; trained models are immutable and safe to share
//! for read-only inference.

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{standard_normal, ImageDataset};
use crate::tensor::{Graph, NodeId, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Softmax,
    None,
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Softmax => "softmax",
            Activation::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "softmax" => Ok(Activation::Softmax),
            "none" => Ok(Activation::None),
            other => Err(Error::InvalidArgument {
                op: "activation",
                msg: format!("unknown activation '{other}'"),
            }),
        }
    }
}

/// Layer widths plus one activation tag per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        let spec = MlpSpec {
            widths,
            activations,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Hidden layers with one activation, `softmax` output: the standard
    /// classifier stack.
    pub fn classifier(widths: Vec<usize>, hidden: Activation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidArgument {
                op: "mlp_spec",
                msg: "need at least input and output widths".into(),
            });
        }
        let mut activations = vec![hidden; widths.len() - 2];
        activations.push(Activation::Softmax);
        MlpSpec::new(widths, activations)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::InvalidArgument {
                op: "mlp_spec",
                msg: "need at least input and output widths".into(),
            });
        }
        if self.activations.len() != self.widths.len() - 1 {
            return Err(Error::InvalidArgument {
                op: "mlp_spec",
                msg: format!(
                    "{} widths require {} activations, got {}",
                    self.widths.len(),
                    self.widths.len() - 1,
                    self.activations.len()
                ),
            });
        }
        if let Some(&w) = self.widths.iter().find(|&&w| w == 0) {
            return Err(Error::InvalidArgument {
                op: "mlp_spec",
                msg: format!("zero layer width {w}"),
            });
        }
        if self.activations[..self.activations.len() - 1].contains(&Activation::Softmax) {
            return Err(Error::InvalidArgument {
                op: "mlp_spec",
                msg: "softmax is only supported on the output layer".into(),
            });
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

/// A stack of affine layers with activations. Parameters are stored as
/// `[w0, b0, w1, b1, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    params: Vec<Tensor>,
}

impl Mlp {
    /// Seeded uniform init in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn init(spec: MlpSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::new();
        for layer in 0..spec.widths.len() - 1 {
            let (fan_in, fan_out) = (spec.widths[layer], spec.widths[layer + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let wvals: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            params.push(Tensor::matrix(fan_in, fan_out, wvals)?.tracked());
            params.push(Tensor::zeros(vec![1, fan_out]).tracked());
        }
        Ok(Mlp { spec, params })
    }

    pub fn from_parts(spec: MlpSpec, params: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        if params.len() != 2 * (spec.widths.len() - 1) {
            return Err(Error::InvalidArgument {
                op: "mlp_from_parts",
                msg: format!(
                    "expected {} parameter tensors, got {}",
                    2 * (spec.widths.len() - 1),
                    params.len()
                ),
            });
        }
        for layer in 0..spec.widths.len() - 1 {
            let (fi, fo) = (spec.widths[layer], spec.widths[layer + 1]);
            if params[2 * layer].shape() != [fi, fo] || params[2 * layer + 1].shape() != [1, fo] {
                return Err(Error::ShapeMismatch {
                    op: "mlp_from_parts",
                    left: params[2 * layer].shape().to_vec(),
                    right: vec![fi, fo],
                });
            }
        }
        Ok(Mlp { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Registers every parameter in the graph; tracked for training,
    /// constant for inference.
    pub fn push_params(&self, g: &mut Graph, tracked: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| if tracked { g.leaf(p) } else { g.constant(p) })
            .collect()
    }

    /// Forward pass through all layers including the final activation.
    pub fn forward(&self, g: &mut Graph, x: NodeId, params: &[NodeId]) -> Result<NodeId> {
        self.forward_inner(g, x, params, false)
    }

    /// Forward pass that stops before the final activation, for fused losses.
    pub fn forward_pre_activation(
        &self,
        g: &mut Graph,
        x: NodeId,
        params: &[NodeId],
    ) -> Result<NodeId> {
        self.forward_inner(g, x, params, true)
    }

    fn forward_inner(
        &self,
        g: &mut Graph,
        x: NodeId,
        params: &[NodeId],
        skip_last_activation: bool,
    ) -> Result<NodeId> {
        let layers = self.spec.widths.len() - 1;
        let mut h = x;
        for layer in 0..layers {
            h = g.matmul(h, params[2 * layer])?;
            h = g.add(h, params[2 * layer + 1])?;
            let last = layer == layers - 1;
            if last && skip_last_activation {
                break;
            }
            h = match self.spec.activations[layer] {
                Activation::Relu => g.relu(h)?,
                Activation::Tanh => g.tanh(h)?,
                Activation::Sigmoid => g.sigmoid(h)?,
                Activation::Softmax => g.softmax(h)?,
                Activation::None => h,
            };
        }
        Ok(h)
    }

    fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    fn accumulate_grads(&mut self, g: &Graph, ids: &[NodeId]) -> Result<()> {
        for (p, &id) in self.params.iter_mut().zip(ids) {
            g.accumulate_grad(id, p)?;
        }
        Ok(())
    }
}

/// Interprets `t` as a `[m, input_dim]` batch: either it already is one, or
/// it is a single image/vector whose element count matches `input_dim`.
pub(crate) fn as_batch(t: &Tensor, input_dim: usize) -> Result<Tensor> {
    if t.shape().len() == 2 && t.shape()[1] == input_dim {
        return Ok(t.clone());
    }
    if t.numel() == input_dim {
        return Tensor::new(vec![1, input_dim], t.values().to_vec());
    }
    Err(Error::ShapeMismatch {
        op: "as_batch",
        left: t.shape().to_vec(),
        right: vec![input_dim],
    })
}

// ── Adam ────────────────────────────────────────────────────────────────

/// Adam with bias correction; one moment pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(param_lens: &[usize], learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            m: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(params: &[Tensor], learning_rate: f64) -> Self {
        let lens: Vec<usize> = params.iter().map(|p| p.numel()).collect();
        AdamState::new(&lens, learning_rate)
    }

    /// One bias-corrected update from each tensor's `grad` buffer. Gradients
    /// are left in place; callers zero them explicitly.
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::InvalidArgument {
                op: "adam_step",
                msg: format!(
                    "state tracks {} tensors, got {}",
                    self.m.len(),
                    params.len()
                ),
            });
        }
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let n = p.numel();
            if self.m[k].len() != n {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: vec![self.m[k].len()],
                    right: vec![n],
                });
            }
            let grad = p.grad.as_ref().ok_or(Error::InvalidArgument {
                op: "adam_step",
                msg: format!("parameter {k} has no gradient"),
            })?;
            if grad.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: vec![grad.len()],
                    right: vec![n],
                });
            }
            let grad = grad.clone();
            let values = p.values_mut();
            for i in 0..n {
                let g = grad[i];
                self.m[k][i] = self.beta1 * self.m[k][i] + (1.0 - self.beta1) * g;
                self.v[k][i] = self.beta2 * self.v[k][i] + (1.0 - self.beta2) * g * g;
                let m_hat = self.m[k][i] / bc1;
                let v_hat = self.v[k][i] / bc2;
                values[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Free-function form of the Adam update.
pub fn adam_step(state: &mut AdamState, params: &mut [Tensor]) -> Result<()> {
    state.step(params)
}

// ── classifier ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct TrainParams {
    pub epochs: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            epochs: 1,
            seed: 0,
            learning_rate: 1e-3,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Softmax-output MLP over flattened images.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    mlp: Mlp,
    classes: usize,
}

impl Classifier {
    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        if *mlp.spec().activations.last().unwrap() != Activation::Softmax {
            return Err(Error::InvalidArgument {
                op: "classifier",
                msg: "output activation must be softmax".into(),
            });
        }
        let classes = mlp.spec().output_dim();
        Ok(Classifier { mlp, classes })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.spec().input_dim()
    }

    /// Class probabilities, one row per input; rows sum to 1.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let xb = as_batch(x, self.input_dim())?;
        let mut g = Graph::new();
        let xn = g.constant(&xb);
        let params = self.mlp.push_params(&mut g, false);
        let out = self.mlp.forward(&mut g, xn, &params)?;
        g.extract(out)
    }

    /// Probabilities for a single image as a plain vector.
    pub fn predict_one(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.predict(x)?.values().to_vec())
    }

    /// Builds the differentiable probability node on an existing graph, with
    /// the parameters entering as constants.
    pub fn probs_node(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let params = self.mlp.push_params(g, false);
        self.mlp.forward(g, x, &params)
    }
}

/// Fraction of images whose argmax probability matches the label.
pub fn accuracy(clf: &Classifier, ds: &ImageDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyInput { op: "accuracy" });
    }
    let mut correct = 0usize;
    let chunk = 256;
    let mut start = 0;
    while start < ds.n() {
        let end = (start + chunk).min(ds.n());
        let idx: Vec<usize> = (start..end).collect();
        let batch = ds.subset(&idx);
        let probs = clf.predict(&batch.images_matrix())?;
        let k = clf.classes();
        for (row, &label) in batch.labels.iter().enumerate() {
            let p = &probs.values()[row * k..(row + 1) * k];
            let argmax = p
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if argmax == label {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / ds.n() as f64)
}

/// Trains a softmax classifier with Adam on shuffled minibatches.
/// Deterministic for a fixed seed.
pub fn classifier_train(
    data: &ImageDataset,
    spec: &MlpSpec,
    hp: &TrainParams,
) -> Result<(Classifier, TrainLog)> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput {
            op: "classifier_train",
        });
    }
    if spec.input_dim() != data.image_len() {
        return Err(Error::ShapeMismatch {
            op: "classifier_train",
            left: vec![spec.input_dim()],
            right: vec![data.image_len()],
        });
    }
    let classes = spec.output_dim();
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut mlp = Mlp::init(spec.clone(), &mut rng)?;
    let mut adam = AdamState::for_params(mlp.params(), hp.learning_rate);
    let mut log = TrainLog::default();

    for _ in 0..hp.epochs {
        let mut order: Vec<usize> = (0..data.n()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(hp.batch_size.max(1)) {
            let batch = data.subset(chunk);
            let mut g = Graph::new();
            let xn = g.constant(&batch.images_matrix());
            let pids = mlp.push_params(&mut g, true);
            let logits = mlp.forward_pre_activation(&mut g, xn, &pids)?;
            let loss = g.cross_entropy_logits(logits, &batch.labels)?;
            epoch_loss += g.item(loss)?;
            batches += 1;
            g.backward(loss)?;
            mlp.zero_grads();
            mlp.accumulate_grads(&g, &pids)?;
            adam.step(mlp.params_mut())?;
        }
        log.epoch_losses.push(epoch_loss / batches as f64);
    }

    Ok((Classifier { mlp, classes }, log))
}

// ── VAE ─────────────────────────────────────────────────────────────────

/// Weights of the VAE training objective. The reconstruction term is the
/// per-image BCE sum averaged over the batch; `l1_weight` scales the
/// per-image L1 norm of the reconstruction and `sobel_weight` the mean
/// squared Sobel response.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeLossWeights {
    pub kl_weight: f64,
    pub l1_weight: f64,
    pub sobel_weight: f64,
}

impl Default for VaeLossWeights {
    fn default() -> Self {
        VaeLossWeights {
            kl_weight: 1.0,
            l1_weight: 0.05,
            sobel_weight: 0.05,
        }
    }
}

impl VaeLossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("kl_weight", self.kl_weight),
            ("l1_weight", self.l1_weight),
            ("sobel_weight", self.sobel_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument {
                    op: "vae_loss_weights",
                    msg: format!("{name} must be a nonnegative float, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// Variational autoencoder over flattened images. `encode` returns the
/// posterior mean, so encoding is deterministic; sampling happens only
/// inside training.
#[derive(Debug, Clone, PartialEq)]
pub struct Vae {
    pub latent_dim: usize,
    pub input_dim: usize,
    /// Image height/width so decoded vectors can be reshaped.
    pub image_h: usize,
    pub image_w: usize,
    enc_trunk: Mlp,
    enc_mu: Mlp,
    enc_logvar: Mlp,
    dec: Mlp,
}

impl Vae {
    pub fn from_parts(
        image_h: usize,
        image_w: usize,
        enc_trunk: Mlp,
        enc_mu: Mlp,
        enc_logvar: Mlp,
        dec: Mlp,
    ) -> Result<Self> {
        let input_dim = enc_trunk.spec().input_dim();
        let latent_dim = enc_mu.spec().output_dim();
        if image_h * image_w != input_dim
            || enc_logvar.spec().output_dim() != latent_dim
            || enc_mu.spec().input_dim() != enc_trunk.spec().output_dim()
            || enc_logvar.spec().input_dim() != enc_trunk.spec().output_dim()
            || dec.spec().input_dim() != latent_dim
            || dec.spec().output_dim() != input_dim
        {
            return Err(Error::InvalidArgument {
                op: "vae_from_parts",
                msg: "inconsistent encoder/decoder shapes".into(),
            });
        }
        Ok(Vae {
            latent_dim,
            input_dim,
            image_h,
            image_w,
            enc_trunk,
            enc_mu,
            enc_logvar,
            dec,
        })
    }

    pub fn blocks(&self) -> [(&'static str, &Mlp); 4] {
        [
            ("enc_trunk", &self.enc_trunk),
            ("enc_mu", &self.enc_mu),
            ("enc_logvar", &self.enc_logvar),
            ("dec", &self.dec),
        ]
    }

    /// Posterior mean for each input row: `[m, latent_dim]`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let xb = as_batch(x, self.input_dim)?;
        let mut g = Graph::new();
        let xn = g.constant(&xb);
        let tp = self.enc_trunk.push_params(&mut g, false);
        let h = self.enc_trunk.forward(&mut g, xn, &tp)?;
        let mp = self.enc_mu.push_params(&mut g, false);
        let mu = self.enc_mu.forward(&mut g, h, &mp)?;
        g.extract(mu)
    }

    /// Latent vector of a single image.
    pub fn encode_one(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.encode(x)?.values().to_vec())
    }

    /// Decoded pixels in (0, 1): `[m, input_dim]`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let zb = as_batch(z, self.latent_dim)?;
        let mut g = Graph::new();
        let zn = g.constant(&zb);
        let out = self.decode_node(&mut g, zn)?;
        g.extract(out)
    }

    /// Decodes a single latent into an `[h, w]` image.
    pub fn decode_image(&self, z: &[f64]) -> Result<Tensor> {
        let t = self.decode(&Tensor::row(z))?;
        t.reshaped(vec![self.image_h, self.image_w])
    }

    /// Differentiable decode on an existing graph (parameters constant).
    pub fn decode_node(&self, g: &mut Graph, z: NodeId) -> Result<NodeId> {
        let dp = self.dec.push_params(g, false);
        let logits = self.dec.forward_pre_activation(g, z, &dp)?;
        g.sigmoid(logits)
    }
}

/// Trains a VAE with the reparameterization trick and the configured
/// penalty terms. Deterministic for a fixed seed.
pub fn vae_train(
    data: &ImageDataset,
    latent_dim: usize,
    hidden: usize,
    weights: &VaeLossWeights,
    hp: &TrainParams,
) -> Result<(Vae, TrainLog)> {
    if latent_dim == 0 {
        return Err(Error::InvalidArgument {
            op: "vae_train",
            msg: "latent dimension must be positive".into(),
        });
    }
    if data.is_empty() {
        return Err(Error::EmptyInput { op: "vae_train" });
    }
    weights.validate()?;
    let input_dim = data.image_len();

    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut enc_trunk = Mlp::init(
        MlpSpec::new(vec![input_dim, hidden], vec![Activation::Tanh])?,
        &mut rng,
    )?;
    let mut enc_mu = Mlp::init(
        MlpSpec::new(vec![hidden, latent_dim], vec![Activation::None])?,
        &mut rng,
    )?;
    let mut enc_logvar = Mlp::init(
        MlpSpec::new(vec![hidden, latent_dim], vec![Activation::None])?,
        &mut rng,
    )?;
    let mut dec = Mlp::init(
        MlpSpec::new(
            vec![latent_dim, hidden, input_dim],
            vec![Activation::Tanh, Activation::None],
        )?,
        &mut rng,
    )?;

    let all_lens: Vec<usize> = enc_trunk
        .params()
        .iter()
        .chain(enc_mu.params())
        .chain(enc_logvar.params())
        .chain(dec.params())
        .map(|p| p.numel())
        .collect();
    let mut adam = AdamState::new(&all_lens, hp.learning_rate);
    let mut log = TrainLog::default();

    for _ in 0..hp.epochs {
        let mut order: Vec<usize> = (0..data.n()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(hp.batch_size.max(1)) {
            let batch = data.subset(chunk);
            let bs = batch.n();
            let x = batch.images_matrix();

            let mut g = Graph::new();
            let xn = g.constant(&x);
            let tp = enc_trunk.push_params(&mut g, true);
            let mp = enc_mu.push_params(&mut g, true);
            let vp = enc_logvar.push_params(&mut g, true);
            let dp = dec.push_params(&mut g, true);

            let h = enc_trunk.forward(&mut g, xn, &tp)?;
            let mu = enc_mu.forward(&mut g, h, &mp)?;
            let logvar = enc_logvar.forward(&mut g, h, &vp)?;

            // z = mu + eps * exp(logvar / 2)
            let eps_vals: Vec<f64> = (0..bs * latent_dim)
                .map(|_| standard_normal(&mut rng))
                .collect();
            let eps = g.constant(&Tensor::matrix(bs, latent_dim, eps_vals)?);
            let half_lv = g.affine_scalar(logvar, 0.5, 0.0)?;
            let sd = g.exp(half_lv)?;
            let noise = g.mul(eps, sd)?;
            let z = g.add(mu, noise)?;

            let logits = dec.forward_pre_activation(&mut g, z, &dp)?;
            let mut loss = g.bce_logits(logits, xn)?;
            if weights.kl_weight > 0.0 {
                let kl = g.kl_std_normal(mu, logvar)?;
                let kl = g.scale(kl, weights.kl_weight)?;
                loss = g.add(loss, kl)?;
            }
            if weights.l1_weight > 0.0 || weights.sobel_weight > 0.0 {
                let recon = g.sigmoid(logits)?;
                if weights.l1_weight > 0.0 {
                    let l1 = g.l1_norm(recon)?;
                    let l1 = g.scale(l1, weights.l1_weight / bs as f64)?;
                    loss = g.add(loss, l1)?;
                }
                if weights.sobel_weight > 0.0 {
                    let sb = g.sobel_batch(recon, data.h, data.w)?;
                    let sb = g.scale(sb, weights.sobel_weight)?;
                    loss = g.add(loss, sb)?;
                }
            }

            epoch_loss += g.item(loss)?;
            batches += 1;
            g.backward(loss)?;

            for mlp in [&mut enc_trunk, &mut enc_mu, &mut enc_logvar, &mut dec] {
                mlp.zero_grads();
            }
            enc_trunk.accumulate_grads(&g, &tp)?;
            enc_mu.accumulate_grads(&g, &mp)?;
            enc_logvar.accumulate_grads(&g, &vp)?;
            dec.accumulate_grads(&g, &dp)?;

            let mut all: Vec<Tensor> = Vec::with_capacity(all_lens.len());
            for mlp in [&enc_trunk, &enc_mu, &enc_logvar, &dec] {
                all.extend(mlp.params().iter().cloned());
            }
            adam.step(&mut all)?;
            let mut it = all.into_iter();
            for mlp in [&mut enc_trunk, &mut enc_mu, &mut enc_logvar, &mut dec] {
                for p in mlp.params_mut() {
                    *p = it.next().unwrap();
                }
            }
        }
        log.epoch_losses.push(epoch_loss / batches as f64);
    }

    let vae = Vae::from_parts(data.h, data.w, enc_trunk, enc_mu, enc_logvar, dec)?;
    Ok((vae, log))
}

/// Mean per-image BCE between images and their deterministic
/// reconstructions, for held-out evaluation.
pub fn reconstruction_bce(vae: &Vae, ds: &ImageDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyInput {
            op: "reconstruction_bce",
        });
    }
    let mut total = 0.0;
    let chunk = 256;
    let mut start = 0;
    while start < ds.n() {
        let end = (start + chunk).min(ds.n());
        let idx: Vec<usize> = (start..end).collect();
        let batch = ds.subset(&idx);
        let x = batch.images_matrix();
        let z = vae.encode(&x)?;
        let recon = vae.decode(&z)?;
        for (&p, &t) in recon.values().iter().zip(x.values()) {
            let p = p.clamp(1e-12, 1.0 - 1e-12);
            total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        }
        start = end;
    }
    Ok(total / ds.n() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_digits;

    fn tiny_digits(seed: u64, n: usize) -> ImageDataset {
        synth_digits(seed, n, 12)
    }

    fn tiny_spec() -> MlpSpec {
        MlpSpec::classifier(vec![144, 32, 10], Activation::Relu).unwrap()
    }

    #[test]
    fn spec_validation_rejects_bad_shapes() {
        assert!(MlpSpec::new(vec![4], vec![]).is_err());
        assert!(MlpSpec::new(vec![4, 2], vec![]).is_err());
        assert!(
            MlpSpec::new(vec![4, 3, 2], vec![Activation::Softmax, Activation::None]).is_err()
        );
    }

    #[test]
    fn untrained_classifier_is_near_chance() {
        let data = tiny_digits(1, 500);
        let hp = TrainParams {
            epochs: 0,
            ..TrainParams::default()
        };
        let (clf, log) = classifier_train(&data, &tiny_spec(), &hp).unwrap();
        assert!(log.epoch_losses.is_empty());
        let acc = accuracy(&clf, &data).unwrap();
        assert!((0.05..=0.2).contains(&acc), "chance-level accuracy: {acc}");
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let data = tiny_digits(2, 200);
        let hp = TrainParams {
            epochs: 1,
            seed: 7,
            ..TrainParams::default()
        };
        let (a, _) = classifier_train(&data, &tiny_spec(), &hp).unwrap();
        let (b, _) = classifier_train(&data, &tiny_spec(), &hp).unwrap();
        for (pa, pb) in a.mlp().params().iter().zip(b.mlp().params()) {
            assert_eq!(pa.values(), pb.values());
        }
    }

    #[test]
    fn training_rejects_bad_labels_and_empty_data() {
        let mut data = tiny_digits(3, 20);
        data.labels[5] = 12;
        assert!(matches!(
            classifier_train(&data, &tiny_spec(), &TrainParams::default()),
            Err(Error::LabelOutOfRange { label: 12, .. })
        ));
        let empty = ImageDataset::new(12, 12, vec![], vec![]).unwrap();
        assert!(matches!(
            classifier_train(&empty, &tiny_spec(), &TrainParams::default()),
            Err(Error::EmptyInput { .. })
        ));
    }

    #[test]
    fn probabilities_sum_to_one() {
        let data = tiny_digits(4, 120);
        let hp = TrainParams {
            epochs: 1,
            ..TrainParams::default()
        };
        let (clf, _) = classifier_train(&data, &tiny_spec(), &hp).unwrap();
        let probs = clf.predict(&data.images_matrix()).unwrap();
        for row in 0..data.n() {
            let sum: f64 = probs.values()[row * 10..(row + 1) * 10].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "row {row} sums to {sum}");
        }
    }

    #[test]
    fn prediction_is_pure() {
        let data = tiny_digits(5, 30);
        let hp = TrainParams {
            epochs: 1,
            ..TrainParams::default()
        };
        let (clf, _) = classifier_train(&data, &tiny_spec(), &hp).unwrap();
        let x = data.image(3);
        assert_eq!(clf.predict_one(&x).unwrap(), clf.predict_one(&x).unwrap());
    }

    #[test]
    fn epoch_losses_non_increasing_over_first_three_epochs() {
        let data = tiny_digits(6, 400);
        let hp = TrainParams {
            epochs: 3,
            seed: 1,
            ..TrainParams::default()
        };
        let (_, log) = classifier_train(&data, &tiny_spec(), &hp).unwrap();
        assert!(log.epoch_losses[0] >= log.epoch_losses[1]);
        assert!(log.epoch_losses[1] >= log.epoch_losses[2]);
    }

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::row(&[1.0, -2.0, 3.0]);
        p.zero_grad();
        let mut state = AdamState::for_params(std::slice::from_ref(&p), 0.1);
        let mut params = [p];
        state.step(&mut params).unwrap();
        assert_eq!(params[0].values(), &[1.0, -2.0, 3.0]);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn adam_first_step_matches_hand_evaluated_recurrence() {
        // t=1: m_hat = g, v_hat = g^2, delta = -lr * g / (|g| + eps)
        let lr = 0.01;
        let g = 0.37;
        let mut p = Tensor::scalar(2.0);
        p.grad = Some(vec![g]);
        let mut state = AdamState::for_params(std::slice::from_ref(&p), lr);
        let mut params = [p];
        state.step(&mut params).unwrap();
        let expected = 2.0 - lr * g / (g + 1e-8);
        assert!((params[0].values()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_converges_on_quadratic_and_matches_reference() {
        // independent scalar reference implementation of the same recurrence
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let mut x_ref = 0.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = 2.0 * (x_ref - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            x_ref -= lr * m_hat / (v_hat.sqrt() + eps);
        }

        let mut state = AdamState::new(&[1], lr);
        let mut params = [Tensor::scalar(0.0)];
        for _ in 0..100 {
            let x = params[0].values()[0];
            params[0].grad = Some(vec![2.0 * (x - 3.0)]);
            state.step(&mut params).unwrap();
        }
        let x = params[0].values()[0];
        assert!((x - x_ref).abs() < 1e-12, "{x} vs reference {x_ref}");
        assert!((x - 3.0).abs() < 0.1, "did not approach minimum: {x}");
    }

    fn quick_vae(data: &ImageDataset, weights: VaeLossWeights, seed: u64, epochs: usize) -> Vae {
        let hp = TrainParams {
            epochs,
            seed,
            learning_rate: 2e-3,
            batch_size: 32,
        };
        vae_train(data, 6, 48, &weights, &hp).unwrap().0
    }

    #[test]
    fn vae_rejects_degenerate_inputs() {
        let data = tiny_digits(7, 10);
        assert!(vae_train(
            &data,
            0,
            8,
            &VaeLossWeights::default(),
            &TrainParams::default()
        )
        .is_err());
        let empty = ImageDataset::new(4, 4, vec![], vec![]).unwrap();
        assert!(vae_train(
            &empty,
            4,
            8,
            &VaeLossWeights::default(),
            &TrainParams::default()
        )
        .is_err());
    }

    #[test]
    fn trained_vae_beats_untrained_on_held_out_bce() {
        let train = tiny_digits(8, 300);
        let held_out = tiny_digits(9, 60);
        let w = VaeLossWeights {
            kl_weight: 1.0,
            l1_weight: 0.0,
            sobel_weight: 0.0,
        };
        let untrained = quick_vae(&train, w, 11, 0);
        let trained = quick_vae(&train, w, 11, 3);
        let bce_untrained = reconstruction_bce(&untrained, &held_out).unwrap();
        let bce_trained = reconstruction_bce(&trained, &held_out).unwrap();
        assert!(
            bce_trained < bce_untrained,
            "trained {bce_trained} vs untrained {bce_untrained}"
        );
    }

    #[test]
    fn encode_is_deterministic_and_decode_round_trips_shape() {
        let train = tiny_digits(10, 100);
        let vae = quick_vae(&train, VaeLossWeights::default(), 3, 1);
        let x = train.image(0);
        let z1 = vae.encode_one(&x).unwrap();
        let z2 = vae.encode_one(&x).unwrap();
        assert_eq!(z1, z2);
        let recon = vae.decode_image(&z1).unwrap();
        assert_eq!(recon.shape(), x.shape());
        assert!(recon.values().iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn reconstruction_beats_decoding_the_origin() {
        let train = tiny_digits(12, 400);
        let held_out = tiny_digits(13, 50);
        let vae = quick_vae(&train, VaeLossWeights::default(), 5, 4);
        let zero = vae.decode(&Tensor::zeros(vec![1, vae.latent_dim])).unwrap();
        let (mut mae_recon, mut mae_zero) = (0.0, 0.0);
        for i in 0..held_out.n() {
            let x = held_out.image(i);
            let z = vae.encode_one(&x).unwrap();
            let recon = vae.decode(&Tensor::row(&z)).unwrap();
            for (a, b) in recon.values().iter().zip(x.values()) {
                mae_recon += (a - b).abs();
            }
            for (a, b) in zero.values().iter().zip(x.values()) {
                mae_zero += (a - b).abs();
            }
        }
        assert!(
            mae_recon < 0.5 * mae_zero,
            "recon MAE {mae_recon} not below half of baseline {mae_zero}"
        );
    }

    #[test]
    fn l1_penalty_darkens_reconstructions_across_seeds() {
        let mut with_penalty = 0.0;
        let mut without = 0.0;
        for seed in 0..3u64 {
            let train = tiny_digits(20 + seed, 250);
            let base = VaeLossWeights {
                kl_weight: 1.0,
                l1_weight: 0.0,
                sobel_weight: 0.0,
            };
            let penalized = VaeLossWeights {
                l1_weight: 0.1,
                ..base
            };
            let mean_pixel = |vae: &Vae| -> f64 {
                let z = vae.encode(&train.images_matrix()).unwrap();
                let recon = vae.decode(&z).unwrap();
                recon.values().iter().map(|v| v.abs()).sum::<f64>() / recon.numel() as f64
            };
            without += mean_pixel(&quick_vae(&train, base, 40 + seed, 2));
            with_penalty += mean_pixel(&quick_vae(&train, penalized, 40 + seed, 2));
        }
        assert!(
            with_penalty < without,
            "penalized {with_penalty} vs unpenalized {without}"
        );
    }
}
