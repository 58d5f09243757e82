//! Encoder–decoder trained to reconstruct clean signals from noised
//! latents under a perceptually weighted loss.

mod weights;

pub use weights::PerceptualWeights;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{invalid, shape_err, Error, Result};
use crate::metrics::{group_error, si_sdr, weighted_error, FeatureMap};
use crate::noise::{draw_noise, noise_latents, t_of_snr, NoiseSchedule};
use crate::numerics::{cosine_warmup_lr, AdamW, Graph, Mlp, OptimizerState, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bottleneck {
    Tanh,
    LayerNorm,
}

/// Which halves train on noised latents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NtMode {
    /// Noise on; encoder and decoder both update.
    Ed,
    /// Noise on; encoder frozen.
    D,
    /// No noise.
    None,
}

impl NtMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NtMode::Ed => "ED",
            NtMode::D => "D",
            NtMode::None => "NONE",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub bottleneck: Bottleneck,
    pub schedule: NoiseSchedule,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 64,
            latent_dim: 10,
            hidden: vec![64, 64],
            bottleneck: Bottleneck::LayerNorm,
            schedule: NoiseSchedule::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderModel {
    pub config: AutoencoderConfig,
    pub nt_mode: NtMode,
    pub store: ParamStore,
    encoder: Mlp,
    decoder: Mlp,
}

impl AutoencoderModel {
    pub fn new<R: Rng + ?Sized>(config: AutoencoderConfig, nt_mode: NtMode, rng: &mut R) -> Result<Self> {
        if config.latent_dim == 0 || config.input_dim == 0 {
            return invalid("latent and input dimensions must be at least 1");
        }
        if config.bottleneck == Bottleneck::LayerNorm && config.latent_dim < 2 {
            return invalid("a layer-norm bottleneck needs at least 2 latent dimensions");
        }
        config.schedule.validate()?;
        let mut store = ParamStore::new();
        let mut enc_dims = vec![config.input_dim];
        enc_dims.extend(&config.hidden);
        enc_dims.push(config.latent_dim);
        let dec_dims: Vec<usize> = enc_dims.iter().rev().copied().collect();
        let encoder = Mlp::new(&mut store, "encoder", &enc_dims, rng)?;
        let decoder = Mlp::new(&mut store, "decoder", &dec_dims, rng)?;
        Ok(Self {
            config,
            nt_mode,
            store,
            encoder,
            decoder,
        })
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.encoder.params()
    }

    pub fn decoder_params(&self) -> Vec<ParamId> {
        self.decoder.params()
    }

    fn encode_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.encoder.forward(g, &self.store, x)?;
        match self.config.bottleneck {
            Bottleneck::Tanh => g.tanh(h),
            Bottleneck::LayerNorm => g.layer_norm(h),
        }
    }

    fn check_cols(t: &Tensor, want: usize, what: &str) -> Result<()> {
        let (_, c) = t.dims2()?;
        if c != want {
            return shape_err(format!("{what} has {c} columns, model expects {want}"));
        }
        Ok(())
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        Self::check_cols(x, self.config.input_dim, "input")?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let z = self.encode_graph(&mut g, xv)?;
        Ok(g.value(z).clone())
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        Self::check_cols(z, self.config.latent_dim, "latent")?;
        let mut g = Graph::new();
        let zv = g.constant(z.clone())?;
        let x = self.decoder.forward(&mut g, &self.store, zv)?;
        Ok(g.value(x).clone())
    }
}

/// `L = mean over rows of Σ_k w_k·‖proj_k(x − x̂)‖²`.
pub fn perceptual_loss(x: &Tensor, x_hat: &Tensor, weights: &PerceptualWeights, map: &FeatureMap) -> Result<f64> {
    if weights.len() != map.groups() {
        return invalid(format!("{} weights for {} groups", weights.len(), map.groups()));
    }
    Ok(weighted_error(&group_error(x, x_hat, map)?, weights.as_slice()))
}

/// The same loss as a graph node.
fn perceptual_loss_graph(
    g: &mut Graph,
    x: &Tensor,
    x_hat: Var,
    weights: &PerceptualWeights,
    map: &FeatureMap,
) -> Result<Var> {
    let target = g.constant(x.clone())?;
    let diff = g.sub(x_hat, target)?;
    let basis = g.constant(map.basis().clone())?;
    let proj = g.matmul(diff, basis)?;
    let sq = g.square(proj)?;
    let col_w: Vec<f64> = map.column_groups().iter().map(|&k| weights.as_slice()[k]).collect();
    let weighted = g.scale_cols(sq, col_w)?;
    let total = g.sum(weighted)?;
    g.scale(total, 1.0 / x.rows() as f64)
}

/// Optimizer settings and loss definition for training.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub optimizer: AdamW,
    pub warmup: u64,
    pub total_steps: u64,
    pub weights: PerceptualWeights,
    pub map: FeatureMap,
}

/// Everything a training step drew and produced.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub t: Vec<f64>,
    pub noise_seed: u64,
    pub z_prime: Tensor,
    pub encoder_grad_norm: f64,
}

impl Trainer {
    pub fn new(weights: PerceptualWeights, map: FeatureMap, lr: f64, total_steps: u64) -> Result<Self> {
        if weights.len() != map.groups() {
            return invalid(format!("{} weights for {} groups", weights.len(), map.groups()));
        }
        Ok(Self {
            optimizer: AdamW {
                lr,
                ..AdamW::default()
            },
            warmup: (total_steps / 20).min(500),
            total_steps,
            weights,
            map,
        })
    }

    /// One step on `x`: draws per-row `t` (forced to 0 without noise) and
    /// a noise seed, then updates the parameters the mode allows.
    pub fn train_step<R: Rng + ?Sized>(
        &self,
        model: &mut AutoencoderModel,
        state: &mut OptimizerState,
        x: &Tensor,
        rng: &mut R,
    ) -> Result<StepReport> {
        let mut t: Vec<f64> = (0..x.rows()).map(|_| model.config.schedule.sample_t(rng)).collect();
        let noise_seed: u64 = rng.random();
        if model.nt_mode == NtMode::None {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        self.train_step_with(model, state, x, t, noise_seed)
    }

    /// [`Trainer::train_step`] with the noise draw supplied by the caller.
    pub fn train_step_with(
        &self,
        model: &mut AutoencoderModel,
        state: &mut OptimizerState,
        x: &Tensor,
        t: Vec<f64>,
        noise_seed: u64,
    ) -> Result<StepReport> {
        AutoencoderModel::check_cols(x, model.config.input_dim, "input")?;
        if t.len() != x.rows() || t.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return invalid("need one t in [0, 1] per row");
        }
        let mut g = match model.nt_mode {
            NtMode::D => Graph::with_frozen(model.encoder_params()),
            _ => Graph::new(),
        };
        let xv = g.constant(x.clone())?;
        let z = model.encode_graph(&mut g, xv)?;
        let noise = draw_noise(g.value(z).shape(), model.config.schedule.gamma, noise_seed);
        let mut scaled_noise = noise;
        for (i, &ti) in t.iter().enumerate() {
            scaled_noise.row_mut(i).iter_mut().for_each(|v| *v *= ti);
        }
        let keep: Vec<f64> = t.iter().map(|v| 1.0 - v).collect();
        let zs = g.scale_rows(z, keep)?;
        let z_prime = g.add_const(zs, &scaled_noise)?;
        let x_hat = model.decoder.forward(&mut g, &model.store, z_prime)?;
        let loss = perceptual_loss_graph(&mut g, x, x_hat, &self.weights, &self.map)?;
        let loss_value = g.value(loss).item()?;
        if !loss_value.is_finite() {
            return Err(Error::Diverged(format!("loss {loss_value} at step {}", state.step_count)));
        }
        let grads = g.backward(loss)?;
        let encoder_grad_norm = model
            .encoder_params()
            .iter()
            .filter_map(|&id| grads.param(id))
            .map(Tensor::sq_norm)
            .sum::<f64>()
            .sqrt();
        let z_prime_value = g.value(z_prime).clone();
        let lr = cosine_warmup_lr(self.optimizer.lr, state.step_count, self.warmup, self.total_steps);
        let grads = grads.for_store(&model.store);
        self.optimizer.step(&mut model.store, &grads, state, lr)?;
        Ok(StepReport {
            loss: loss_value,
            t,
            noise_seed,
            z_prime: z_prime_value,
            encoder_grad_norm,
        })
    }

    /// Runs `steps` minibatch steps over `data`, returning every loss.
    pub fn fit<R: Rng + ?Sized>(
        &self,
        model: &mut AutoencoderModel,
        state: &mut OptimizerState,
        data: &Tensor,
        batch_size: usize,
        steps: u64,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let n = data.rows();
        if n == 0 || batch_size == 0 {
            return invalid("training needs data and a positive batch size");
        }
        let b = batch_size.min(n);
        let mut losses = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let idx = sample(rng, n, b).into_vec();
            let batch = data.select_rows(&idx);
            losses.push(self.train_step(model, state, &batch, rng)?.loss);
        }
        Ok(losses)
    }
}

/// `E[z²]` of the encoded dataset.
pub fn latent_variance_probe(model: &AutoencoderModel, data: &Tensor) -> Result<f64> {
    if data.rows() == 0 || data.is_empty() {
        return Err(Error::Degenerate("empty dataset".into()));
    }
    let z = model.encode(data)?;
    Ok(z.sq_norm() / z.len() as f64)
}

/// Reconstruction quality at one SNR level.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub snr: f64,
    pub t: f64,
    pub group_error: Vec<f64>,
    pub weighted_error: f64,
    pub si_sdr_db: f64,
}

/// Noises latents to each SNR (`f64::INFINITY` for clean), decodes, and
/// averages per-group error and SI-SDR over `draws` noise draws.
pub fn reconstruction_sweep<R: Rng + ?Sized>(
    model: &AutoencoderModel,
    data: &Tensor,
    snr_levels: &[f64],
    draws: usize,
    weights: &PerceptualWeights,
    map: &FeatureMap,
    rng: &mut R,
) -> Result<Vec<SweepRow>> {
    if draws == 0 {
        return invalid("need at least one noise draw");
    }
    let z = model.encode(data)?;
    let z_power = z.sq_norm() / z.len() as f64;
    let gamma = model.config.schedule.gamma;
    let mut rows = Vec::with_capacity(snr_levels.len());
    for &snr in snr_levels {
        if !(snr > 0.0) {
            return invalid(format!("SNR level {snr} must be positive"));
        }
        let (t, n) = if snr.is_infinite() {
            (0.0, 1)
        } else {
            (t_of_snr(snr, z_power, gamma)?, draws)
        };
        let mut err = vec![0.0; map.groups()];
        let mut sdr = 0.0;
        for _ in 0..n {
            let zp = if t == 0.0 {
                z.clone()
            } else {
                noise_latents(&z, t, gamma, rng)?.z_prime
            };
            let x_hat = model.decode(&zp)?;
            for (a, e) in err.iter_mut().zip(group_error(data, &x_hat, map)?) {
                *a += e / n as f64;
            }
            let mut s = 0.0;
            for i in 0..data.rows() {
                s += si_sdr(data.row(i), x_hat.row(i))?;
            }
            sdr += s / data.rows() as f64 / n as f64;
        }
        rows.push(SweepRow {
            snr,
            t,
            weighted_error: weighted_error(&err, weights.as_slice()),
            group_error: err,
            si_sdr_db: sdr,
        });
    }
    Ok(rows)
}
