use rand::seq::index::sample;
use rand::Rng;

use super::{log_density, DivergenceField, GraphField, VectorField};
use crate::error::{invalid, shape_err, Error, Result};
use crate::noise::{mix_rows, NoiseSchedule};
use crate::numerics::{
    cosine_warmup_lr, gemm, AdamW, Graph, GruCell, Mlp, OptimizerState, ParamStore, Tensor, Var,
};

#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    /// Latent frame dimension.
    pub dim: usize,
    /// Recurrent context width.
    pub context_dim: usize,
    /// Width of both hidden layers of the velocity net.
    pub hidden: usize,
    /// Sinusoid frequencies in the time embedding (two features each).
    pub time_freqs: usize,
    /// Flow-time distribution during training.
    pub schedule: NoiseSchedule,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            context_dim: 64,
            hidden: 64,
            time_freqs: 4,
            schedule: NoiseSchedule {
                m: 0.0,
                s: 1.0,
                gamma: 1.0,
            },
        }
    }
}

/// Autoregressive conditional flow: a gated recurrent cell summarizes the
/// frames before `i` into `c_i` (zeros for `i = 0`), and a two-hidden-layer
/// tanh net maps `[x, emb(t), c]` to a velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    pub config: FlowConfig,
    pub store: ParamStore,
    gru: GruCell,
    velocity: Mlp,
}

/// `[sin(2^k π t), cos(2^k π t)]` for `k < freqs`, one row per time.
pub fn time_embedding(t: &[f64], freqs: usize) -> Tensor {
    let mut data = Vec::with_capacity(t.len() * 2 * freqs);
    for &tv in t {
        for k in 0..freqs {
            let w = (1u64 << k) as f64 * std::f64::consts::PI * tv;
            data.push(w.sin());
            data.push(w.cos());
        }
    }
    Tensor::new(vec![t.len(), 2 * freqs], data).expect("embedding shape")
}

impl FlowModel {
    pub fn new<R: Rng + ?Sized>(config: FlowConfig, rng: &mut R) -> Result<Self> {
        if config.dim == 0 || config.context_dim == 0 || config.hidden == 0 {
            return invalid("flow dimensions must be at least 1");
        }
        config.schedule.validate()?;
        let mut store = ParamStore::new();
        let gru = GruCell::new(&mut store, "context", config.dim, config.context_dim, rng)?;
        let in_dim = config.dim + 2 * config.time_freqs + config.context_dim;
        let velocity = Mlp::new(
            &mut store,
            "velocity",
            &[in_dim, config.hidden, config.hidden, config.dim],
            rng,
        )?;
        // Zero output layer: v ≡ 0 at init.
        let out = velocity.layers.last().expect("three layers").weight;
        store.get_mut(out).data_mut().fill(0.0);
        Ok(Self {
            config,
            store,
            gru,
            velocity,
        })
    }

    fn check_sequence(&self, seq: &Tensor) -> Result<usize> {
        let (len, d) = seq.dims2()?;
        if d != self.config.dim {
            return shape_err(format!("frames have {d} dims, model expects {}", self.config.dim));
        }
        if len == 0 {
            return invalid("empty sequence");
        }
        Ok(len)
    }

    /// Teacher-forced contexts of equally long sequences, frame-major:
    /// row `i·B + s` is the context of frame `i` of sequence `s`.
    fn contexts_graph(&self, g: &mut Graph, seqs: &[Tensor]) -> Result<Var> {
        let len = self.check_sequence(&seqs[0])?;
        for s in seqs {
            if self.check_sequence(s)? != len {
                return shape_err("sequences in a batch must share a length");
            }
        }
        let b = seqs.len();
        let mut h = g.constant(Tensor::zeros(&[b, self.config.context_dim]))?;
        let mut all = Vec::with_capacity(len);
        for i in 0..len {
            all.push(h);
            if i + 1 < len {
                let frames: Vec<Vec<f64>> = seqs.iter().map(|s| s.row(i).to_vec()).collect();
                let x = g.constant(Tensor::from_rows(&frames)?)?;
                h = self.gru.forward(g, &self.store, x, h)?;
            }
        }
        g.concat_rows(&all)
    }

    /// `[len, context_dim]` contexts of one sequence; row `i` depends only
    /// on frames `< i`.
    pub fn contexts(&self, seq: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let c = self.contexts_graph(&mut g, std::slice::from_ref(seq))?;
        Ok(g.value(c).clone())
    }

    fn velocity_graph(&self, g: &mut Graph, x: Var, t_rows: &[f64], ctx: Var) -> Result<Var> {
        let emb = g.constant(time_embedding(t_rows, self.config.time_freqs))?;
        let input = g.concat_cols(&[x, emb, ctx])?;
        self.velocity.forward(g, &self.store, input)
    }

    /// The field at fixed contexts, as a differentiable graph.
    pub fn graph_field(&self, ctx: Tensor) -> ModelField<'_> {
        ModelField { model: self, ctx }
    }

    /// Snapshot of the velocity weights for fast integration.
    pub fn inference(&self) -> Result<FlowInference> {
        let ids = self.velocity.params();
        let w1 = self.store.get(ids[0]);
        let (d, e, c, hdim) = (
            self.config.dim,
            2 * self.config.time_freqs,
            self.config.context_dim,
            self.config.hidden,
        );
        let rows = |lo: usize, hi: usize| -> Result<Tensor> {
            Tensor::matrix(hi - lo, hdim, w1.data()[lo * hdim..hi * hdim].to_vec())
        };
        let w1x = rows(0, d)?;
        let w1e = rows(d, d + e)?;
        let w1c = rows(d + e, d + e + c)?;
        let w2 = self.store.get(ids[2]).clone();
        let w3 = self.store.get(ids[4]).clone();
        // trace J = Σ_{a,b} d1_b·d2_a·W2[b,a]·(W1xᵀW3ᵀ)[b,a].
        let m = w1x.transpose()?.matmul(&w3.transpose()?)?;
        let k = w2.zip_map(&m, |a, b| a * b)?;
        Ok(FlowInference {
            model: self.clone(),
            w1x,
            w1e,
            w1c,
            b1: self.store.get(ids[1]).data().to_vec(),
            w2,
            b2: self.store.get(ids[3]).data().to_vec(),
            w3,
            b3: self.store.get(ids[5]).data().to_vec(),
            trace_kernel: k,
        })
    }
}

/// [`GraphField`] view of a model at fixed per-row contexts.
#[derive(Clone, Debug)]
pub struct ModelField<'a> {
    model: &'a FlowModel,
    ctx: Tensor,
}

impl GraphField for ModelField<'_> {
    fn dim(&self) -> usize {
        self.model.config.dim
    }

    fn build(&self, g: &mut Graph, x: Var, t: f64) -> Result<Var> {
        let rows = g.value(x).rows();
        if rows != self.ctx.rows() {
            return shape_err(format!("{rows} states for {} contexts", self.ctx.rows()));
        }
        let ctx = g.constant(self.ctx.clone())?;
        self.model.velocity_graph(g, x, &vec![t; rows], ctx)
    }
}

/// Plain-loop evaluation of a trained velocity net with its exact
/// Jacobian trace in closed form.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowInference {
    model: FlowModel,
    w1x: Tensor,
    w1e: Tensor,
    w1c: Tensor,
    b1: Vec<f64>,
    w2: Tensor,
    b2: Vec<f64>,
    w3: Tensor,
    b3: Vec<f64>,
    trace_kernel: Tensor,
}

impl FlowInference {
    pub fn model(&self) -> &FlowModel {
        &self.model
    }

    pub fn dim(&self) -> usize {
        self.model.config.dim
    }

    /// Binds per-row contexts, folding their first-layer contribution in.
    pub fn condition(&self, ctx: &Tensor) -> Result<ConditionedField<'_>> {
        let (rows, c) = ctx.dims2()?;
        if c != self.model.config.context_dim {
            return shape_err(format!("contexts have {c} columns"));
        }
        let h = self.model.config.hidden;
        let mut pre = vec![0.0; rows * h];
        for r in 0..rows {
            pre[r * h..(r + 1) * h].copy_from_slice(&self.b1);
        }
        gemm(&mut pre, ctx.data(), self.w1c.data(), rows, c, h, false, false, 1.0);
        Ok(ConditionedField {
            inf: self,
            pre,
            rows,
        })
    }

    /// Per-frame IC of equally long sequences at one noise level.
    ///
    /// Returns one vector per sequence; `t_level = 0` evaluates the clean
    /// frames, otherwise each frame is averaged over `n_draws` noisings.
    pub fn sequences_ic<R: Rng + ?Sized>(
        &self,
        seqs: &[Tensor],
        t_level: f64,
        n_draws: usize,
        steps: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>> {
        if seqs.is_empty() {
            return Ok(vec![]);
        }
        if n_draws == 0 {
            return invalid("need at least one noise draw");
        }
        if !(0.0..1.0).contains(&t_level) {
            return invalid(format!("t_level = {t_level} outside [0, 1)"));
        }
        let d = self.dim();
        let c = self.model.config.context_dim;
        let mut frames = Vec::new();
        let mut ctx = Vec::new();
        let mut lens = Vec::with_capacity(seqs.len());
        for s in seqs {
            lens.push(self.model.check_sequence(s)?);
            frames.extend_from_slice(s.data());
            ctx.extend_from_slice(self.model.contexts(s)?.data());
        }
        let n = lens.iter().sum::<usize>();
        let draws = if t_level == 0.0 { 1 } else { n_draws };
        let mut x = Vec::with_capacity(n * draws * d);
        let mut cx = Vec::with_capacity(n * draws * c);
        for _ in 0..draws {
            x.extend_from_slice(&frames);
            cx.extend_from_slice(&ctx);
        }
        let mut x = Tensor::matrix(n * draws, d, x)?;
        if t_level > 0.0 {
            let eps = Tensor::randn(x.shape(), 1.0, rng);
            x = mix_rows(&x, &vec![t_level; n * draws], &eps)?;
        }
        let field = self.condition(&Tensor::matrix(n * draws, c, cx)?)?;
        let lp = log_density(&field, &x, t_level, steps)?;
        let mut ic = vec![0.0; n];
        for (i, v) in lp.iter().enumerate() {
            ic[i % n] -= v / draws as f64;
        }
        let mut out = Vec::with_capacity(seqs.len());
        let mut start = 0;
        for len in lens {
            out.push(ic[start..start + len].to_vec());
            start += len;
        }
        Ok(out)
    }
}

/// A [`FlowInference`] bound to contexts, one per state row.
#[derive(Clone, Debug)]
pub struct ConditionedField<'a> {
    inf: &'a FlowInference,
    pre: Vec<f64>,
    rows: usize,
}

impl ConditionedField<'_> {
    fn eval(&self, x: &Tensor, t: f64, want_div: bool) -> Result<(Tensor, Vec<f64>)> {
        let inf = self.inf;
        let (rows, d) = x.dims2()?;
        if d != inf.dim() || rows != self.rows {
            return shape_err(format!("state {rows}x{d} for {} contexts of dim {}", self.rows, inf.dim()));
        }
        let h = inf.model.config.hidden;
        let emb = time_embedding(&[t], inf.model.config.time_freqs);
        let mut shift = vec![0.0; h];
        gemm(&mut shift, emb.data(), inf.w1e.data(), 1, emb.cols(), h, false, false, 0.0);

        let mut a1 = self.pre.clone();
        for row in a1.chunks_mut(h) {
            for (v, s) in row.iter_mut().zip(&shift) {
                *v += s;
            }
        }
        gemm(&mut a1, x.data(), inf.w1x.data(), rows, d, h, false, false, 1.0);
        a1.iter_mut().for_each(|v| *v = v.tanh());

        let mut a2 = vec![0.0; rows * h];
        for row in a2.chunks_mut(h) {
            row.copy_from_slice(&inf.b2);
        }
        gemm(&mut a2, &a1, inf.w2.data(), rows, h, h, false, false, 1.0);
        a2.iter_mut().for_each(|v| *v = v.tanh());

        let mut out = vec![0.0; rows * d];
        for row in out.chunks_mut(d) {
            row.copy_from_slice(&inf.b3);
        }
        gemm(&mut out, &a2, inf.w3.data(), rows, h, d, false, false, 1.0);

        let mut div = Vec::new();
        if want_div {
            // d_l = 1 − a_l², then trace_r = Σ_b d1[r,b]·(d2 Kᵀ)[r,b].
            let d1: Vec<f64> = a1.iter().map(|v| 1.0 - v * v).collect();
            let d2: Vec<f64> = a2.iter().map(|v| 1.0 - v * v).collect();
            let mut q = vec![0.0; rows * h];
            gemm(&mut q, &d2, inf.trace_kernel.data(), rows, h, h, false, true, 0.0);
            div = d1
                .chunks(h)
                .zip(q.chunks(h))
                .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u * v).sum())
                .collect();
        }
        let v = Tensor::matrix(rows, d, out)?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("flow velocity at t = {t}")));
        }
        Ok((v, div))
    }
}

impl VectorField for ConditionedField<'_> {
    fn dim(&self) -> usize {
        self.inf.dim()
    }

    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        Ok(self.eval(x, t, false)?.0)
    }
}

impl DivergenceField for ConditionedField<'_> {
    fn velocity_and_divergence(&self, x: &Tensor, t: f64) -> Result<(Tensor, Vec<f64>)> {
        self.eval(x, t, true)
    }
}

/// Rectified-flow training: `x_t = (1 − t)x₀ + t·x₁`, target `x₁ − x₀`,
/// loss `mean_rows ‖v − (x₁ − x₀)‖²`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowTrainer {
    pub optimizer: AdamW,
    pub warmup: u64,
    pub total_steps: u64,
}

impl FlowTrainer {
    pub fn new(lr: f64, warmup: u64, total_steps: u64) -> Self {
        Self {
            optimizer: AdamW {
                lr,
                ..AdamW::default()
            },
            warmup,
            total_steps,
        }
    }

    /// Loss and gradients of one batch with the given draws.
    pub fn loss_and_grads(
        &self,
        model: &FlowModel,
        seqs: &[Tensor],
        t: &[f64],
        x1: &Tensor,
    ) -> Result<(f64, Vec<Option<Tensor>>)> {
        if seqs.is_empty() {
            return invalid("empty batch");
        }
        let len = model.check_sequence(&seqs[0])?;
        let rows = len * seqs.len();
        if t.len() != rows || x1.shape() != [rows, model.config.dim] {
            return shape_err("time and noise draws must cover every frame");
        }
        let mut g = Graph::new();
        let ctx = model.contexts_graph(&mut g, seqs)?;
        let mut x0 = Vec::with_capacity(rows * model.config.dim);
        for i in 0..len {
            for s in seqs {
                x0.extend_from_slice(s.row(i));
            }
        }
        let x0 = Tensor::matrix(rows, model.config.dim, x0)?;
        let xt = g.constant(mix_rows(&x0, t, x1)?)?;
        let target = g.constant(x1.zip_map(&x0, |a, b| a - b)?)?;
        let v = model.velocity_graph(&mut g, xt, t, ctx)?;
        let diff = g.sub(v, target)?;
        let sq = g.square(diff)?;
        let total = g.sum(sq)?;
        let loss = g.scale(total, 1.0 / rows as f64)?;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Diverged(format!("flow loss {value}")));
        }
        let grads = g.backward(loss)?;
        Ok((value, grads.for_store(&model.store)))
    }

    pub fn train_step<R: Rng + ?Sized>(
        &self,
        model: &mut FlowModel,
        state: &mut OptimizerState,
        seqs: &[Tensor],
        rng: &mut R,
    ) -> Result<f64> {
        if seqs.is_empty() {
            return invalid("empty batch");
        }
        let rows = seqs[0].rows() * seqs.len();
        let t: Vec<f64> = (0..rows).map(|_| model.config.schedule.sample_t(rng)).collect();
        let x1 = Tensor::randn(&[rows, model.config.dim], 1.0, rng);
        let (loss, grads) = self.loss_and_grads(model, seqs, &t, &x1)?;
        let lr = cosine_warmup_lr(self.optimizer.lr, state.step_count, self.warmup, self.total_steps);
        self.optimizer.step(&mut model.store, &grads, state, lr)?;
        Ok(loss)
    }

    /// `steps` updates on random batches of `batch` sequences.
    pub fn fit<R: Rng + ?Sized>(
        &self,
        model: &mut FlowModel,
        state: &mut OptimizerState,
        data: &[Tensor],
        batch: usize,
        steps: u64,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if data.is_empty() || batch == 0 {
            return invalid("training needs sequences and a positive batch size");
        }
        let b = batch.min(data.len());
        let mut losses = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let idx = sample(rng, data.len(), b).into_vec();
            let seqs: Vec<Tensor> = idx.iter().map(|&i| data[i].clone()).collect();
            losses.push(self.train_step(model, state, &seqs, rng)?);
        }
        Ok(losses)
    }
}
