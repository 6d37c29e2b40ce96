//! Transformer autoencoder with linear phase embedding, center-frame
//! prediction head and machine-ID classifier.
//!
//! Shapes below use `B` for batch, `T` for context frames (4 by default),
//! `D` for model width (128), `P` for phase bins (513) and `K` for the
//! number of machine IDs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{FeatureStats, FrameWindow};
use crate::error::{AsdError, Result};
use crate::numgrad::{BatchStats, BnMode, Checkpoint, Graph, ParamId, ParamStore, Tensor, Var};

/// Momentum of batch-norm running statistics: running = m * running + (1 - m) * batch.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub n_mels: usize,
    pub phase_dim: usize,
    pub context_len: usize,
    pub num_ids: usize,
    /// Weight of the classification loss in the joint loss.
    pub alpha: f64,
    pub classifier_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            ff_dim: 256,
            enc_layers: 2,
            dec_layers: 2,
            n_mels: 128,
            phase_dim: 513,
            context_len: 4,
            num_ids: 4,
            alpha: 0.3,
            classifier_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(AsdError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model != self.n_mels {
            return Err(AsdError::Config(format!(
                "the phase embedding is added to the log-Mel input, so d_model ({}) must equal n_mels ({})",
                self.d_model, self.n_mels
            )));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(AsdError::Config(format!("alpha must be in [0, 1), got {}", self.alpha)));
        }
        if self.num_ids < 2 {
            return Err(AsdError::Config(format!(
                "the ID classifier needs at least 2 classes, got {}",
                self.num_ids
            )));
        }
        if self.context_len == 0 || self.ff_dim == 0 || self.classifier_hidden == 0 {
            return Err(AsdError::Config("layer sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Mode {
    /// Batch-norm uses batch statistics.
    Train,
    /// Batch-norm uses running statistics.
    Eval,
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: store.add(format!("{name}.weight"), Tensor::glorot(fan_in, fan_out, rng)),
            b: store.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out])),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w)?;
        let b = g.param(store, self.b)?;
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(vec![dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![dim])),
        }
    }
}

#[derive(Debug, Clone)]
struct BatchNorm {
    norm: Norm,
    running_mean: usize,
    running_var: usize,
}

impl BatchNorm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            norm: Norm::new(store, name, dim),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(vec![dim])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::filled(vec![dim], 1.0)),
        }
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: Norm,
    ff1: Linear,
    ff2: Linear,
    ln2: Norm,
}

impl EncoderLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        Self {
            q: Linear::new(store, &format!("{name}.attn.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.attn.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.attn.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.attn.o"), d, d, rng),
            ln1: Norm::new(store, &format!("{name}.ln1"), d),
            ff1: Linear::new(store, &format!("{name}.ff1"), d, cfg.ff_dim, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), cfg.ff_dim, d, rng),
            ln2: Norm::new(store, &format!("{name}.ln2"), d),
        }
    }
}

/// IDs of the parameters grouped by sub-network.
#[derive(Debug, Clone)]
struct Layout {
    lpe1: Linear,
    lpe_bn1: BatchNorm,
    lpe2: Linear,
    lpe_bn2: BatchNorm,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<EncoderLayer>,
    head: Linear,
    cls1: Linear,
    cls2: Linear,
}

/// Output nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Latent feature `[B, T, D]`.
    pub z: Var,
    /// Decoder output `[B, T, M]`.
    pub x_bar: Var,
    /// Predicted center frame `[B, M]`.
    pub center: Var,
    /// ID probabilities `[B, K]` when the classifier ran.
    pub probs: Option<Var>,
    /// Batch statistics of the two LPE batch-norm layers (training mode only).
    pub bn_stats: Vec<BatchStats>,
}

/// A mini-batch of windows in model layout.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, T, M]` standardized context frames.
    pub context: Tensor,
    /// `[B, T, P]` phase angles of the context frames.
    pub phase: Tensor,
    /// `[B, M]` standardized center frames.
    pub target: Tensor,
    /// `[B, K]` one-hot machine IDs.
    pub ids: Option<Tensor>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.context.shape()[0]
    }

    /// Stacks windows (already standardized). `labels` are class indices.
    pub fn from_windows(windows: &[&FrameWindow], labels: Option<&[usize]>, num_ids: usize) -> Result<Self> {
        let b = windows.len();
        if b == 0 {
            return Err(AsdError::State("empty batch".into()));
        }
        let m = windows[0].center_target.len();
        let t = windows[0].context_len();
        let p = windows[0].phase_context.len() / t;
        let mut context = Vec::with_capacity(b * t * m);
        let mut phase = Vec::with_capacity(b * t * p);
        let mut target = Vec::with_capacity(b * m);
        for w in windows {
            if w.context.len() != t * m || w.phase_context.len() != t * p {
                return Err(AsdError::shape(
                    "batch",
                    &[t, m, p],
                    &[w.context.len(), w.phase_context.len()],
                ));
            }
            context.extend_from_slice(&w.context);
            phase.extend_from_slice(&w.phase_context);
            target.extend_from_slice(&w.center_target);
        }
        let ids = match labels {
            Some(l) => Some(one_hot(l, num_ids)?),
            None => None,
        };
        Ok(Self {
            context: Tensor::new(vec![b, t, m], context)?,
            phase: Tensor::new(vec![b, t, p], phase)?,
            target: Tensor::new(vec![b, m], target)?,
            ids,
        })
    }
}

pub fn one_hot(labels: &[usize], k: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(AsdError::Config(format!("label {l} outside {k} classes")));
        }
        data[i * k + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), k], data)
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    layout: Layout,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let lpe1 = Linear::new(&mut store, "lpe.fc1", config.phase_dim, d, &mut rng);
        let lpe_bn1 = BatchNorm::new(&mut store, "lpe.bn1", d);
        let lpe2 = Linear::new(&mut store, "lpe.fc2", d, d, &mut rng);
        let lpe_bn2 = BatchNorm::new(&mut store, "lpe.bn2", d);
        let encoder = (0..config.enc_layers)
            .map(|i| EncoderLayer::new(&mut store, &format!("encoder.{i}"), &config, &mut rng))
            .collect();
        let decoder = (0..config.dec_layers)
            .map(|i| EncoderLayer::new(&mut store, &format!("decoder.{i}"), &config, &mut rng))
            .collect();
        let head = Linear::new(&mut store, "head", d, config.n_mels, &mut rng);
        let cls1 = Linear::new(&mut store, "classifier.fc1", d, config.classifier_hidden, &mut rng);
        let cls2 = Linear::new(&mut store, "classifier.fc2", config.classifier_hidden, config.num_ids, &mut rng);
        Ok(Self {
            config,
            store,
            layout: Layout {
                lpe1,
                lpe_bn1,
                lpe2,
                lpe_bn2,
                encoder,
                decoder,
                head,
                cls1,
                cls2,
            },
        })
    }

    /// Parameters, batch-norm buffers and normalization statistics as a
    /// checkpoint; `config_echo` records the run configuration.
    pub fn to_checkpoint(&self, stats: &FeatureStats, config_echo: String) -> Checkpoint {
        Checkpoint {
            tensors: self.store.named_tensors(),
            norm_mean: stats.mean.clone(),
            norm_std: stats.std.clone(),
            config: config_echo,
        }
    }

    /// Rebuilds a model of shape `config` from a checkpoint.
    pub fn from_checkpoint(config: ModelConfig, ckpt: &Checkpoint) -> Result<(Self, FeatureStats)> {
        let mut model = Self::new(config, 0)?;
        model.store.load_named(&ckpt.tensors)?;
        if ckpt.norm_mean.len() != model.config.n_mels || ckpt.norm_std.len() != model.config.n_mels {
            return Err(AsdError::shape(
                "checkpoint normalization",
                &[ckpt.norm_mean.len(), ckpt.norm_std.len()],
                &[model.config.n_mels],
            ));
        }
        let stats = FeatureStats {
            mean: ckpt.norm_mean.clone(),
            std: ckpt.norm_std.clone(),
        };
        Ok((model, stats))
    }

    /// True for the parameters of the ID classifier.
    pub fn is_classifier_param(&self, id: ParamId) -> bool {
        self.store.name(id).starts_with("classifier.")
    }

    /// Parameters of the phase embedding.
    pub fn lpe_params(&self) -> Vec<ParamId> {
        let l = &self.layout;
        vec![
            l.lpe1.w,
            l.lpe1.b,
            l.lpe_bn1.norm.gain,
            l.lpe_bn1.norm.bias,
            l.lpe2.w,
            l.lpe2.b,
            l.lpe_bn2.norm.gain,
            l.lpe_bn2.norm.bias,
        ]
    }

    /// Output projection `(W_o, b_o)`.
    pub fn head_params(&self) -> (ParamId, ParamId) {
        (self.layout.head.w, self.layout.head.b)
    }

    /// Final classifier layer `(weight, bias)`.
    pub fn classifier_output_params(&self) -> (ParamId, ParamId) {
        (self.layout.cls2.w, self.layout.cls2.b)
    }

    fn batch_norm(&self, g: &mut Graph, bn: &BatchNorm, x: Var, mode: Mode) -> Result<(Var, Option<BatchStats>)> {
        let gain = g.param(&self.store, bn.norm.gain)?;
        let bias = g.param(&self.store, bn.norm.bias)?;
        match mode {
            Mode::Train => g.batch_norm(x, gain, bias, BnMode::Train),
            Mode::Eval => g.batch_norm(
                x,
                gain,
                bias,
                BnMode::Eval {
                    mean: self.store.buffer(bn.running_mean).data(),
                    var: self.store.buffer(bn.running_var).data(),
                },
            ),
        }
    }

    /// `F(phase) = BN(Linear(BN(Linear(phase))))`, applied frame-wise:
    /// `[B, T, P] -> [B, T, D]`.
    pub fn lpe_embed(&self, g: &mut Graph, phase: Var, mode: Mode) -> Result<(Var, Vec<BatchStats>)> {
        let l = &self.layout;
        let h = l.lpe1.forward(g, &self.store, phase)?;
        let (h, s1) = self.batch_norm(g, &l.lpe_bn1, h, mode)?;
        let h = l.lpe2.forward(g, &self.store, h)?;
        let (h, s2) = self.batch_norm(g, &l.lpe_bn2, h, mode)?;
        Ok((h, s1.into_iter().chain(s2).collect()))
    }

    fn attention(&self, g: &mut Graph, layer: &EncoderLayer, x: Var) -> Result<Var> {
        let (b, t, d) = {
            let s = g.shape(x);
            (s[0], s[1], s[2])
        };
        let h = self.config.n_heads;
        let dh = d / h;
        let split = |lin: &Linear, g: &mut Graph| -> Result<Var> {
            let y = lin.forward(g, &self.store, x)?;
            let y = g.reshape(y, vec![b, t, h, dh])?;
            let y = g.permute(y, &[0, 2, 1, 3])?;
            g.reshape(y, vec![b * h, t, dh])
        };
        let q = split(&layer.q, g)?;
        let k = split(&layer.k, g)?;
        let v = split(&layer.v, g)?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = g.softmax(scores)?;
        let ctx = g.bmm(attn, v, false)?;
        let ctx = g.reshape(ctx, vec![b, h, t, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, vec![b, t, d])?;
        layer.o.forward(g, &self.store, ctx)
    }

    /// Post-norm Transformer encoder layer: self-attention, residual, layer
    /// norm, then feed-forward, residual, layer norm.
    fn encoder_layer(&self, g: &mut Graph, layer: &EncoderLayer, x: Var) -> Result<Var> {
        let a = self.attention(g, layer, x)?;
        let x = g.add(x, a)?;
        let gain = g.param(&self.store, layer.ln1.gain)?;
        let bias = g.param(&self.store, layer.ln1.bias)?;
        let x = g.layer_norm(x, gain, bias)?;
        let f = layer.ff1.forward(g, &self.store, x)?;
        let f = g.relu(f)?;
        let f = layer.ff2.forward(g, &self.store, f)?;
        let x = g.add(x, f)?;
        let gain = g.param(&self.store, layer.ln2.gain)?;
        let bias = g.param(&self.store, layer.ln2.bias)?;
        g.layer_norm(x, gain, bias)
    }

    /// `z = E(X + F(phase))`: `[B, T, M], [B, T, P] -> [B, T, D]`.
    pub fn encode(&self, g: &mut Graph, x: Var, phase: Var, mode: Mode) -> Result<(Var, Vec<BatchStats>)> {
        let (emb, stats) = self.lpe_embed(g, phase, mode)?;
        let mut h = g.add(x, emb)?;
        for layer in &self.layout.encoder {
            h = self.encoder_layer(g, layer, h)?;
        }
        Ok((h, stats))
    }

    /// Same as [`Model::encode`] but without the phase embedding, for
    /// ablations and tests.
    pub fn encode_without_lpe(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layout.encoder {
            h = self.encoder_layer(g, layer, h)?;
        }
        Ok(h)
    }

    /// `X_bar = D(z)`: `[B, T, D] -> [B, T, M]`.
    pub fn decode(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let mut h = z;
        for layer in &self.layout.decoder {
            h = self.encoder_layer(g, layer, h)?;
        }
        Ok(h)
    }

    /// Average-pools the decoder frames and applies `W_o`, `b_o`:
    /// `[B, T, M] -> [B, M]`.
    pub fn predict_center(&self, g: &mut Graph, x_bar: Var) -> Result<Var> {
        let pooled = g.mean_pool(x_bar, 1)?;
        self.layout.head.forward(g, &self.store, pooled)
    }

    /// `softmax(Linear(ReLU(Linear(maxpool_frames(z)))))`: `[B, T, D] -> [B, K]`.
    pub fn classify(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let pooled = g.max_pool(z, 1)?;
        let h = self.layout.cls1.forward(g, &self.store, pooled)?;
        let h = g.relu(h)?;
        let logits = self.layout.cls2.forward(g, &self.store, h)?;
        g.softmax(logits)
    }

    /// Full forward pass. The classifier branch runs only when
    /// `with_classifier` is set.
    pub fn forward(&self, g: &mut Graph, batch: &Batch, mode: Mode, with_classifier: bool) -> Result<Forward> {
        let x = g.input(batch.context.clone())?;
        let phase = g.input(batch.phase.clone())?;
        let (z, bn_stats) = self.encode(g, x, phase, mode)?;
        let x_bar = self.decode(g, z)?;
        let center = self.predict_center(g, x_bar)?;
        let probs = if with_classifier {
            Some(self.classify(g, z)?)
        } else {
            None
        };
        Ok(Forward {
            z,
            x_bar,
            center,
            probs,
            bn_stats,
        })
    }

    /// Folds batch statistics from a training forward pass into the running
    /// averages of the LPE batch-norm layers.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        let layers = [
            (self.layout.lpe_bn1.running_mean, self.layout.lpe_bn1.running_var),
            (self.layout.lpe_bn2.running_mean, self.layout.lpe_bn2.running_var),
        ];
        for ((mean_buf, var_buf), s) in layers.iter().zip(stats) {
            let blend = |buf: &mut Tensor, batch: &[f64]| {
                for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                }
            };
            blend(self.store.buffer_mut(*mean_buf), &s.mean);
            blend(self.store.buffer_mut(*var_buf), &s.var);
        }
    }
}

/// Reconstruction loss: squared L2 error of the predicted center frame,
/// summed over mel bins and averaged over the batch.
pub fn loss_reconstruction(g: &mut Graph, center: Var, target: Var) -> Result<Var> {
    g.mse_loss(center, target)
}

/// Classification loss: batch-mean cross-entropy against one-hot IDs.
pub fn loss_classification(g: &mut Graph, probs: Var, one_hot: Var) -> Result<Var> {
    g.cross_entropy(probs, one_hot)
}

/// `(1 - alpha) * L_r + alpha * L_c`.
pub fn loss_total(g: &mut Graph, loss_r: Var, loss_c: Var, alpha: f64) -> Result<Var> {
    g.weighted_sum(loss_r, 1.0 - alpha, loss_c, alpha)
}

/// Output of [`Model::batch_loss`].
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub total: Var,
    pub loss_r: Var,
    pub loss_c: Option<Var>,
}

impl Model {
    /// Builds the training objective for one batch: `L_total` when `joint`
    /// (requires IDs in the batch), otherwise `L_r` alone.
    pub fn batch_loss(&self, g: &mut Graph, batch: &Batch, mode: Mode, joint: bool) -> Result<(BatchLoss, Forward)> {
        let fwd = self.forward(g, batch, mode, joint)?;
        let target = g.input(batch.target.clone())?;
        let loss_r = loss_reconstruction(g, fwd.center, target)?;
        if !joint {
            return Ok((
                BatchLoss {
                    total: loss_r,
                    loss_r,
                    loss_c: None,
                },
                fwd,
            ));
        }
        let ids = batch
            .ids
            .clone()
            .ok_or_else(|| AsdError::State("joint loss needs machine-ID labels".into()))?;
        let ids = g.input(ids)?;
        let loss_c = loss_classification(g, fwd.probs.expect("classifier ran"), ids)?;
        let total = loss_total(g, loss_r, loss_c, self.config.alpha)?;
        Ok((
            BatchLoss {
                total,
                loss_r,
                loss_c: Some(loss_c),
            },
            fwd,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            ff_dim: 12,
            enc_layers: 1,
            dec_layers: 1,
            n_mels: 8,
            phase_dim: 6,
            context_len: 4,
            num_ids: 3,
            alpha: 0.3,
            classifier_hidden: 5,
        }
    }

    fn random_batch(cfg: &ModelConfig, b: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = cfg.context_len;
        let labels: Vec<usize> = (0..b).map(|i| i % cfg.num_ids).collect();
        Batch {
            context: Tensor::uniform(vec![b, t, cfg.n_mels], -1.0, 1.0, &mut rng),
            phase: Tensor::uniform(vec![b, t, cfg.phase_dim], -3.14, 3.14, &mut rng),
            target: Tensor::uniform(vec![b, cfg.n_mels], -1.0, 1.0, &mut rng),
            ids: Some(one_hot(&labels, cfg.num_ids).unwrap()),
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad_heads = ModelConfig { n_heads: 3, ..ModelConfig::default() };
        assert!(bad_heads.validate().is_err());
        let bad_alpha = ModelConfig { alpha: 1.0, ..ModelConfig::default() };
        assert!(bad_alpha.validate().is_err());
        let one_id = ModelConfig { num_ids: 1, ..ModelConfig::default() };
        assert!(one_id.validate().is_err());
    }

    #[test]
    fn default_shapes() {
        let cfg = ModelConfig::default();
        let model = Model::new(cfg.clone(), 0).unwrap();
        let batch = random_batch(&cfg, 2, 1);
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &batch, Mode::Train, true).unwrap();
        assert_eq!(g.shape(fwd.z), &[2, 4, 128]);
        assert_eq!(g.shape(fwd.x_bar), &[2, 4, 128]);
        assert_eq!(g.shape(fwd.center), &[2, 128]);
        assert_eq!(g.shape(fwd.probs.unwrap()), &[2, 4]);
        let phase = g.input(Tensor::zeros(vec![1, 4, 513])).unwrap();
        let (emb, _) = model.lpe_embed(&mut g, phase, Mode::Eval).unwrap();
        assert_eq!(g.shape(emb), &[1, 4, 128]);
    }

    #[test]
    fn zero_phase_through_zero_lpe_is_zero() {
        let cfg = small_config();
        let mut model = Model::new(cfg.clone(), 3).unwrap();
        for id in model.lpe_params() {
            if model.store.name(id).contains(".fc") {
                model.store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut g = Graph::new();
        let phase = g.input(Tensor::zeros(vec![2, 4, cfg.phase_dim])).unwrap();
        let (emb, _) = model.lpe_embed(&mut g, phase, Mode::Train).unwrap();
        assert!(g.value(emb).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn classifier_outputs_distribution() {
        let cfg = small_config();
        let model = Model::new(cfg.clone(), 5).unwrap();
        let batch = random_batch(&cfg, 6, 9);
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &batch, Mode::Eval, true).unwrap();
        for row in g.value(fwd.probs.unwrap()).data().chunks(cfg.num_ids) {
            assert_relative_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn zero_final_classifier_layer_gives_uniform() {
        let cfg = small_config();
        let mut model = Model::new(cfg.clone(), 5).unwrap();
        let (w, b) = model.classifier_output_params();
        model.store.value_mut(w).data_mut().iter_mut().for_each(|v| *v = 0.0);
        model.store.value_mut(b).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let batch = random_batch(&cfg, 3, 2);
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &batch, Mode::Eval, true).unwrap();
        for p in g.value(fwd.probs.unwrap()).data() {
            assert_relative_eq!(*p, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn predict_center_with_identity_head_averages_rows() {
        let cfg = small_config();
        let mut model = Model::new(cfg.clone(), 1).unwrap();
        let (w, b) = model.head_params();
        let m = cfg.n_mels;
        let eye: Vec<f64> = (0..m * m).map(|i| if i / m == i % m { 1.0 } else { 0.0 }).collect();
        model.store.value_mut(w).data_mut().copy_from_slice(&eye);
        model.store.value_mut(b).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<f64> = (0..4 * m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 4, m], rows.clone()).unwrap()).unwrap();
        let c = model.predict_center(&mut g, x).unwrap();
        for j in 0..m {
            let mean = (0..4).map(|r| rows[r * m + j]).sum::<f64>() / 4.0;
            assert_relative_eq!(g.value(c).data()[j], mean, epsilon = 1e-12);
        }
    }

    #[test]
    fn predict_center_of_equal_rows_is_affine_map() {
        let cfg = small_config();
        let model = Model::new(cfg.clone(), 8).unwrap();
        let m = cfg.n_mels;
        let v: Vec<f64> = (0..m).map(|i| i as f64 * 0.1 - 0.3).collect();
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 4, m], v.repeat(4)).unwrap()).unwrap();
        let c = model.predict_center(&mut g, x).unwrap();
        let (w, b) = model.head_params();
        let (wd, bd) = (model.store.value(w).data(), model.store.value(b).data());
        for j in 0..m {
            let expect: f64 = (0..m).map(|i| v[i] * wd[i * m + j]).sum::<f64>() + bd[j];
            assert_relative_eq!(g.value(c).data()[j], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn reconstruction_loss_examples() {
        let mut g = Graph::new();
        let t = Tensor::new(vec![1, 128], vec![0.25; 128]).unwrap();
        let p = Tensor::new(vec![1, 128], vec![1.25; 128]).unwrap();
        let (tv, pv) = (g.input(t.clone()).unwrap(), g.input(p).unwrap());
        let l = loss_reconstruction(&mut g, pv, tv).unwrap();
        assert_eq!(g.value(l).item(), 128.0);
        let same = g.input(t).unwrap();
        let l0 = loss_reconstruction(&mut g, same, tv).unwrap();
        assert_eq!(g.value(l0).item(), 0.0);
    }

    #[test]
    fn classification_loss_examples() {
        let mut g = Graph::new();
        let p = g.input(Tensor::new(vec![1, 2], vec![0.9, 0.1]).unwrap()).unwrap();
        let l = g.input(one_hot(&[0], 2).unwrap()).unwrap();
        let lc = loss_classification(&mut g, p, l).unwrap();
        assert!((g.value(lc).item() - 0.10536).abs() < 1e-5);
        let u = g.input(Tensor::filled(vec![2, 4], 0.25)).unwrap();
        let l4 = g.input(one_hot(&[1, 3], 4).unwrap()).unwrap();
        let lu = loss_classification(&mut g, u, l4).unwrap();
        assert_relative_eq!(g.value(lu).item(), 4f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn total_loss_is_affine() {
        let mut g = Graph::new();
        let r = g.input(Tensor::scalar(2.0)).unwrap();
        let c = g.input(Tensor::scalar(1.0)).unwrap();
        let t = loss_total(&mut g, r, c, 0.3).unwrap();
        assert_relative_eq!(g.value(t).item(), 1.7, epsilon = 1e-15);
        let t0 = loss_total(&mut g, r, c, 0.0).unwrap();
        assert_eq!(g.value(t0).item(), 2.0);
    }

    #[test]
    fn running_stats_blend_with_momentum() {
        let cfg = small_config();
        let mut model = Model::new(cfg.clone(), 2).unwrap();
        let batch = random_batch(&cfg, 4, 3);
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &batch, Mode::Train, false).unwrap();
        assert_eq!(fwd.bn_stats.len(), 2);
        let stats = fwd.bn_stats.clone();
        model.update_running_stats(&stats);
        let rm = model.store.buffer(model.layout.lpe_bn1.running_mean).data().to_vec();
        let rv = model.store.buffer(model.layout.lpe_bn1.running_var).data().to_vec();
        for j in 0..cfg.d_model {
            assert_relative_eq!(rm[j], 0.1 * stats[0].mean[j], epsilon = 1e-15);
            assert_relative_eq!(rv[j], 0.9 + 0.1 * stats[0].var[j], epsilon = 1e-15);
        }
    }
}
