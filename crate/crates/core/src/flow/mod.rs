//! Rectified flow over latent frames: probability-flow ODE integration,
//! divergence, log densities and information content at noise levels.

mod model;
mod series;

pub use model::{time_embedding, ConditionedField, FlowConfig, FlowInference, FlowModel, FlowTrainer, ModelField};
pub use series::{
    read_surprisal_csv, write_surprisal_csv, SurprisalRow, SurprisalSeries, SurprisalTable, SURPRISAL_HEADER,
};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, shape_err, Error, Result};
use crate::noise::mix_rows;
use crate::numerics::rng::seeded;
use crate::numerics::{Graph, Tensor, Var};

/// Largest dimension for which the exact divergence is computed.
pub const EXACT_DIVERGENCE_MAX_DIM: usize = 64;

/// A time-dependent velocity field acting row-wise on `[rows, dim]`.
pub trait VectorField {
    fn dim(&self) -> usize;
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

/// A field that also reports `div v` for every row.
pub trait DivergenceField: VectorField {
    fn velocity_and_divergence(&self, x: &Tensor, t: f64) -> Result<(Tensor, Vec<f64>)>;
}

/// A field expressible as a differentiable graph.
pub trait GraphField {
    fn dim(&self) -> usize;
    fn build(&self, g: &mut Graph, x: Var, t: f64) -> Result<Var>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DivergenceMode {
    /// Full Jacobian diagonal, one backward pass per dimension.
    Exact,
    /// Mean of `εᵀ(∂v/∂x)ε` over Rademacher probes.
    Hutchinson(usize),
}

fn check_rows(x: &Tensor, dim: usize) -> Result<()> {
    let (_, c) = x.dims2()?;
    if c != dim {
        return shape_err(format!("state has {c} columns, field has dimension {dim}"));
    }
    Ok(())
}

/// Per-row divergence of a graph field by reverse-mode differentiation.
/// Rows must not interact inside the field.
pub fn divergence<F: GraphField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    x: &Tensor,
    t: f64,
    mode: DivergenceMode,
    rng: &mut R,
) -> Result<Vec<f64>> {
    Ok(divergence_with_velocity(field, x, t, mode, rng)?.1)
}

fn divergence_with_velocity<F: GraphField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    x: &Tensor,
    t: f64,
    mode: DivergenceMode,
    rng: &mut R,
) -> Result<(Tensor, Vec<f64>)> {
    let d = field.dim();
    check_rows(x, d)?;
    let rows = x.rows();
    let mut g = Graph::new();
    let xv = g.variable(x.clone())?;
    let v = field.build(&mut g, xv, t)?;
    if g.value(v).shape() != x.shape() {
        return shape_err("velocity shape differs from state shape");
    }
    let velocity = g.value(v).clone();
    if !g.requires_grad(v) {
        return Ok((velocity, vec![0.0; rows]));
    }
    let mut div = vec![0.0; rows];
    let vjp = |seed: Tensor| -> Result<Tensor> {
        let grads = g.backward_with_seed(v, seed)?;
        Ok(grads.wrt(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
    };
    match mode {
        DivergenceMode::Exact => {
            if d > EXACT_DIVERGENCE_MAX_DIM {
                return invalid(format!(
                    "exact divergence limited to dimension {EXACT_DIVERGENCE_MAX_DIM}, got {d}"
                ));
            }
            for j in 0..d {
                let mut seed = Tensor::zeros(x.shape());
                for r in 0..rows {
                    seed.data_mut()[r * d + j] = 1.0;
                }
                let gx = vjp(seed)?;
                for (r, acc) in div.iter_mut().enumerate() {
                    *acc += gx.get2(r, j);
                }
            }
        }
        DivergenceMode::Hutchinson(n) => {
            if n == 0 {
                return invalid("Hutchinson estimator needs at least one probe");
            }
            for _ in 0..n {
                let eps: Vec<f64> = (0..rows * d)
                    .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                    .collect();
                let eps = Tensor::new(x.shape().to_vec(), eps)?;
                let gx = vjp(eps.clone())?;
                for (r, acc) in div.iter_mut().enumerate() {
                    let q: f64 = gx.row(r).iter().zip(eps.row(r)).map(|(a, b)| a * b).sum();
                    *acc += q / n as f64;
                }
            }
        }
    }
    Ok((velocity, div))
}

/// Adapts a [`GraphField`] to [`DivergenceField`] with autodiff divergence.
/// Hutchinson probes are reseeded from `probe_seed` and `t` on every call.
#[derive(Clone, Debug)]
pub struct AutodiffField<F> {
    pub field: F,
    pub mode: DivergenceMode,
    pub probe_seed: u64,
}

impl<F: GraphField> VectorField for AutodiffField<F> {
    fn dim(&self) -> usize {
        self.field.dim()
    }

    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        check_rows(x, self.field.dim())?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let v = self.field.build(&mut g, xv, t)?;
        Ok(g.value(v).clone())
    }
}

impl<F: GraphField> DivergenceField for AutodiffField<F> {
    fn velocity_and_divergence(&self, x: &Tensor, t: f64) -> Result<(Tensor, Vec<f64>)> {
        let mut rng = seeded(self.probe_seed ^ t.to_bits());
        divergence_with_velocity(&self.field, x, t, self.mode, &mut rng)
    }
}

/// Linear field `v = x·Aᵀ`, i.e. `v_r = A x_r` per row.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearField {
    pub a: Tensor,
}

impl LinearField {
    pub fn trace(&self) -> f64 {
        (0..self.a.rows()).map(|i| self.a.get2(i, i)).sum()
    }
}

impl GraphField for LinearField {
    fn dim(&self) -> usize {
        self.a.rows()
    }

    fn build(&self, g: &mut Graph, x: Var, _t: f64) -> Result<Var> {
        let at = g.constant(self.a.transpose()?)?;
        g.matmul(x, at)
    }
}

/// `v(x, τ) = a(τ)·x` with `a = (2τ − 1)/(2τ² − 2τ + 1)`: the probability
/// flow of `x_τ = (1 − τ)x₀ + τx₁` with both endpoints standard normal.
/// Its marginals are `N(0, s_τ² I)`, `s_τ² = (1 − τ)² + τ²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianInterpolantField {
    pub dim: usize,
}

impl GaussianInterpolantField {
    pub fn rate(t: f64) -> f64 {
        (2.0 * t - 1.0) / (2.0 * t * t - 2.0 * t + 1.0)
    }

    pub fn variance(t: f64) -> f64 {
        (1.0 - t).powi(2) + t * t
    }

    /// Closed-form `log p_τ(x)` for one point.
    pub fn log_marginal(x: &[f64], t: f64) -> f64 {
        let s2 = Self::variance(t);
        let sq: f64 = x.iter().map(|v| v * v).sum();
        -0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI * s2).ln() - sq / (2.0 * s2)
    }
}

impl VectorField for GaussianInterpolantField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        check_rows(x, self.dim)?;
        let a = Self::rate(t);
        Ok(x.map(|v| a * v))
    }
}

impl DivergenceField for GaussianInterpolantField {
    fn velocity_and_divergence(&self, x: &Tensor, t: f64) -> Result<(Tensor, Vec<f64>)> {
        let v = self.velocity(x, t)?;
        Ok((v, vec![self.dim as f64 * Self::rate(t); x.rows()]))
    }
}

impl GraphField for GaussianInterpolantField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn build(&self, g: &mut Graph, x: Var, t: f64) -> Result<Var> {
        g.scale(x, Self::rate(t))
    }
}

fn axpy(x: &Tensor, h: f64, v: &Tensor) -> Result<Tensor> {
    x.zip_map(v, |a, b| a + h * b)
}

fn ensure_finite(x: &Tensor, t: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("ODE state at t = {t}")))
    }
}

/// Fixed-step RK4 from `t_start` to `t_end` (either direction).
pub fn ode_integrate<F: VectorField + ?Sized>(
    field: &F,
    x_start: &Tensor,
    t_start: f64,
    t_end: f64,
    steps: usize,
) -> Result<Tensor> {
    Ok(ode_integrate_path(field, x_start, t_start, t_end, steps)?
        .pop()
        .expect("path holds the start state"))
}

/// [`ode_integrate`] returning every intermediate state, start included.
pub fn ode_integrate_path<F: VectorField + ?Sized>(
    field: &F,
    x_start: &Tensor,
    t_start: f64,
    t_end: f64,
    steps: usize,
) -> Result<Vec<Tensor>> {
    if steps == 0 {
        return invalid("ODE integration needs at least one step");
    }
    check_rows(x_start, field.dim())?;
    let h = (t_end - t_start) / steps as f64;
    let mut path = Vec::with_capacity(steps + 1);
    let mut x = x_start.clone();
    path.push(x.clone());
    for i in 0..steps {
        let t = t_start + i as f64 * h;
        let k1 = field.velocity(&x, t)?;
        let k2 = field.velocity(&axpy(&x, h / 2.0, &k1)?, t + h / 2.0)?;
        let k3 = field.velocity(&axpy(&x, h / 2.0, &k2)?, t + h / 2.0)?;
        let k4 = field.velocity(&axpy(&x, h, &k3)?, t + h)?;
        let mut next = x.clone();
        for (j, v) in next.data_mut().iter_mut().enumerate() {
            *v += h / 6.0 * (k1.data()[j] + 2.0 * k2.data()[j] + 2.0 * k3.data()[j] + k4.data()[j]);
        }
        ensure_finite(&next, t + h)?;
        x = next;
        path.push(x.clone());
    }
    Ok(path)
}

fn standard_normal_log_pdf(x: &[f64]) -> f64 {
    let sq: f64 = x.iter().map(|v| v * v).sum();
    -0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * sq
}

/// `log p_t(x)` per row: `log N(x₁; 0, I) + ∫_t^1 div v dτ`, with the
/// divergence accumulated on the same RK4 stages as the state.
pub fn log_density<F: DivergenceField + ?Sized>(field: &F, x: &Tensor, t_from: f64, steps: usize) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&t_from) {
        return invalid(format!("t_from = {t_from} outside [0, 1)"));
    }
    if steps == 0 {
        return invalid("ODE integration needs at least one step");
    }
    check_rows(x, field.dim())?;
    let rows = x.rows();
    let h = (1.0 - t_from) / steps as f64;
    let mut state = x.clone();
    let mut integral = vec![0.0; rows];
    for i in 0..steps {
        let t = t_from + i as f64 * h;
        let (k1, d1) = field.velocity_and_divergence(&state, t)?;
        let (k2, d2) = field.velocity_and_divergence(&axpy(&state, h / 2.0, &k1)?, t + h / 2.0)?;
        let (k3, d3) = field.velocity_and_divergence(&axpy(&state, h / 2.0, &k2)?, t + h / 2.0)?;
        let (k4, d4) = field.velocity_and_divergence(&axpy(&state, h, &k3)?, t + h)?;
        for (j, v) in state.data_mut().iter_mut().enumerate() {
            *v += h / 6.0 * (k1.data()[j] + 2.0 * k2.data()[j] + 2.0 * k3.data()[j] + k4.data()[j]);
        }
        for r in 0..rows {
            integral[r] += h / 6.0 * (d1[r] + 2.0 * d2[r] + 2.0 * d3[r] + d4[r]);
        }
        ensure_finite(&state, t + h)?;
    }
    let out: Vec<f64> = (0..rows)
        .map(|r| standard_normal_log_pdf(state.row(r)) + integral[r])
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("log-density integral".into()));
    }
    Ok(out)
}

/// Information content `−log p_t(x_t)` per row, in nats.
///
/// At `t_level = 0` this is `−log p_0(x)` with no noise drawn; above it,
/// the mean over `n_draws` noisings `x_t = (1 − t)x + t·ε`.
pub fn ic_at_noise_level<F: DivergenceField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    x: &Tensor,
    t_level: f64,
    n_draws: usize,
    steps: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n_draws == 0 {
        return invalid("need at least one noise draw");
    }
    if t_level == 0.0 {
        return Ok(log_density(field, x, 0.0, steps)?.into_iter().map(|v| -v).collect());
    }
    let rows = x.rows();
    let mut acc = vec![0.0; rows];
    for _ in 0..n_draws {
        let eps = Tensor::randn(x.shape(), 1.0, rng);
        let xt = mix_rows(x, &vec![t_level; rows], &eps)?;
        for (a, lp) in acc.iter_mut().zip(log_density(field, &xt, t_level, steps)?) {
            *a -= lp / n_draws as f64;
        }
    }
    Ok(acc)
}

/// Draws `rows` samples by integrating from noise at `t = 1` back to 0.
pub fn sample<F: VectorField + ?Sized, R: Rng + ?Sized>(field: &F, rows: usize, steps: usize, rng: &mut R) -> Result<Tensor> {
    let x1 = Tensor::new(
        vec![rows, field.dim()],
        (0..rows * field.dim()).map(|_| rng.sample(StandardNormal)).collect(),
    )?;
    ode_integrate(field, &x1, 1.0, 0.0, steps)
}
