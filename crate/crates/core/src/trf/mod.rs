//! Temporal response functions: lagged ridge regression of neural
//! responses on stimulus predictors, cross-validated prediction accuracy
//! and the full-versus-reduced Δr comparison.

mod encoding;

pub use encoding::{
    delta_r_pipeline, fit_trf, loo_cv, write_encoding_csv, write_topography_csv, ChannelTest, DesignSet, EncodingResult,
    GroupTest, LooResult, ParticipantFit, ResponseStats, TrfConfig,
};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rustfft::num_complex::Complex;

use crate::error::{invalid, shape_err, Error, Result};
use crate::metrics::fft_pair;
use crate::numerics::Tensor;

/// Magnitude of the analytic signal, built by zeroing negative
/// frequencies and doubling positive ones.
pub fn hilbert_envelope(signal: &[f64], rate: f64) -> Result<Vec<f64>> {
    let n = signal.len();
    if n < 4 {
        return invalid(format!("Hilbert envelope needs at least 4 samples, got {n}"));
    }
    if !(rate > 0.0) {
        return invalid("sample rate must be positive");
    }
    let (fwd, inv) = fft_pair(n);
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fwd.process(&mut buf);
    for (k, b) in buf.iter_mut().enumerate() {
        let h = if k == 0 || (n % 2 == 0 && k == n / 2) {
            1.0
        } else if k < n.div_ceil(2) {
            2.0
        } else {
            0.0
        };
        *b *= h;
    }
    inv.process(&mut buf);
    Ok(buf.iter().map(|c| c.norm() / n as f64).collect())
}

/// Means of consecutive blocks of `factor` samples; a short tail block is
/// averaged over what it has.
pub fn block_mean(x: &[f64], factor: usize) -> Result<Vec<f64>> {
    if factor == 0 {
        return invalid("block size must be positive");
    }
    Ok(x.chunks(factor).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect())
}

/// Replaces each unvoiced run by one constant drawn from the series'
/// voiced values.
pub fn interpolate_unvoiced<R: Rng + ?Sized>(series: &[f64], voiced: &[bool], rng: &mut R) -> Result<Vec<f64>> {
    if series.len() != voiced.len() {
        return shape_err(format!("{} samples with {} voicing flags", series.len(), voiced.len()));
    }
    let pool: Vec<f64> = series.iter().zip(voiced).filter(|(_, &v)| v).map(|(&x, _)| x).collect();
    if pool.is_empty() {
        return Err(Error::Degenerate("no voiced samples to draw fill values from".into()));
    }
    let mut out = series.to_vec();
    let mut i = 0;
    while i < out.len() {
        if voiced[i] {
            i += 1;
            continue;
        }
        let fill = pool[rng.random_range(0..pool.len())];
        while i < out.len() && !voiced[i] {
            out[i] = fill;
            i += 1;
        }
    }
    Ok(out)
}

/// Lag window in milliseconds with a fitting margin on both sides.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LagWindow {
    pub min_ms: f64,
    pub max_ms: f64,
    pub margin_ms: f64,
    pub rate: f64,
}

impl LagWindow {
    /// [−100, 700] ms with a 50 ms margin.
    pub fn standard(rate: f64) -> Self {
        Self {
            min_ms: -100.0,
            max_ms: 700.0,
            margin_ms: 50.0,
            rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.min_ms, self.max_ms, self.margin_ms, self.rate].iter().all(|v| v.is_finite());
        if !finite || !(self.rate > 0.0) || self.min_ms > self.max_ms || self.margin_ms < 0.0 {
            return invalid("lag window needs min ≤ max, margin ≥ 0 and a positive rate");
        }
        Ok(())
    }

    fn samples(&self, ms: f64) -> i64 {
        (ms / 1000.0 * self.rate).round() as i64
    }

    /// Every fitted lag in samples, margin included.
    pub fn lags(&self) -> Vec<i64> {
        (self.samples(self.min_ms - self.margin_ms)..=self.samples(self.max_ms + self.margin_ms)).collect()
    }

    /// First and last lag of the nominal window, in samples.
    pub fn nominal_bounds(&self) -> (i64, i64) {
        (self.samples(self.min_ms), self.samples(self.max_ms))
    }

    /// Positions within [`lags`](Self::lags) that fall in the nominal window.
    pub fn nominal_positions(&self) -> Vec<usize> {
        let (lo, hi) = self.nominal_bounds();
        self.lags()
            .iter()
            .enumerate()
            .filter(|(_, &l)| (lo..=hi).contains(&l))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Time-lagged copies of every predictor, one column per (predictor, lag).
#[derive(Clone, Debug, PartialEq)]
pub struct LaggedDesign {
    /// `[samples, n_predictors·n_lags]`, column `p·n_lags + l`.
    pub x: Tensor,
    pub lags: Vec<i64>,
    pub n_predictors: usize,
    /// Columns whose lag lies in the nominal window.
    pub nominal_columns: Vec<usize>,
}

/// Column `(p, l)` at time `t` holds `predictor_p[t − lag_l]`, zero where
/// that index falls outside the series.
pub fn build_lagged_design(predictors: &[&[f64]], window: &LagWindow) -> Result<LaggedDesign> {
    window.validate()?;
    if predictors.is_empty() {
        return invalid("need at least one predictor");
    }
    let n = predictors[0].len();
    if predictors.iter().any(|p| p.len() != n) {
        return shape_err("predictors must share a length");
    }
    let lags = window.lags();
    let nl = lags.len();
    if n <= nl {
        return invalid(format!("series of {n} samples is not longer than the {nl}-lag window"));
    }
    let cols = predictors.len() * nl;
    let mut data = vec![0.0; n * cols];
    for (p, series) in predictors.iter().enumerate() {
        for (l, &lag) in lags.iter().enumerate() {
            let col = p * nl + l;
            for t in 0..n {
                let src = t as i64 - lag;
                if (0..n as i64).contains(&src) {
                    data[t * cols + col] = series[src as usize];
                }
            }
        }
    }
    let nominal = window.nominal_positions();
    let nominal_columns = (0..predictors.len())
        .flat_map(|p| nominal.iter().map(move |&l| p * nl + l))
        .collect();
    Ok(LaggedDesign {
        x: Tensor::matrix(n, cols, data)?,
        lags,
        n_predictors: predictors.len(),
        nominal_columns,
    })
}

/// Solves `(A + λI) W = B` for symmetric positive semi-definite `A`
/// (`p × p`, row-major) and `B` (`p × m`).
pub(crate) fn solve_ridge(a: &[f64], b: &[f64], p: usize, m: usize, lambda: f64) -> Result<Vec<f64>> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return invalid(format!("ridge strength {lambda} must be finite and non-negative"));
    }
    let mut mat = DMatrix::from_row_slice(p, p, a);
    for i in 0..p {
        mat[(i, i)] += lambda;
    }
    let chol = mat
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("ridge system at λ = {lambda}; raise λ")))?;
    let rhs = DMatrix::from_row_slice(p, m, b);
    let w = chol.solve(&rhs);
    let mut out = vec![0.0; p * m];
    for i in 0..p {
        for j in 0..m {
            out[i * m + j] = w[(i, j)];
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ridge solution".into()));
    }
    // Cholesky succeeds on numerically singular matrices with tiny pivots;
    // treat a solution that does not satisfy the normal equations as
    // singular too.
    let check = DMatrix::from_row_slice(p, p, a) * DMatrix::from_row_slice(p, m, &out)
        + DMatrix::from_row_slice(p, m, &out) * lambda
        - &rhs;
    let scale = DVector::from_column_slice(b).norm().max(f64::MIN_POSITIVE);
    if check.norm() > 1e-6 * scale {
        return Err(Error::Singular(format!("ridge system at λ = {lambda}; raise λ")));
    }
    Ok(out)
}

/// `w = (XᵀX + λI)⁻¹ Xᵀy` for a design whose columns are already centered.
pub fn ridge_fit(design: &Tensor, response: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let (n, p) = design.dims2()?;
    if response.len() != n {
        return shape_err(format!("{n} design rows for {} responses", response.len()));
    }
    let xt = design.transpose()?;
    let gram = xt.matmul(design)?;
    let xty = xt.matmul(&Tensor::matrix(n, 1, response.to_vec())?)?;
    solve_ridge(gram.data(), xty.data(), p, 1, lambda)
}

/// Ridge weights in the units of the raw predictors.
#[derive(Clone, Debug, PartialEq)]
pub struct TrfModel {
    /// `[n_predictors·n_lags, channels]`.
    pub weights: Tensor,
    pub bias: Vec<f64>,
    /// Ridge strength per channel.
    pub lambda: Vec<f64>,
    pub window: LagWindow,
    pub n_predictors: usize,
}

impl TrfModel {
    /// Kernel of predictor `p` for `channel`, one tap per fitted lag.
    pub fn kernel(&self, p: usize, channel: usize) -> Vec<f64> {
        let nl = self.window.lags().len();
        (0..nl).map(|l| self.weights.get2(p * nl + l, channel)).collect()
    }

    /// `[samples, channels]` prediction; with `nominal_only` the margin
    /// lags are dropped.
    pub fn predict(&self, design: &LaggedDesign, nominal_only: bool) -> Result<Tensor> {
        let mut w = self.weights.clone();
        if w.rows() != design.x.cols() {
            return shape_err(format!("design has {} columns, model {}", design.x.cols(), w.rows()));
        }
        if nominal_only {
            for row in 0..w.rows() {
                if !design.nominal_columns.contains(&row) {
                    w.row_mut(row).iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        let mut y = design.x.matmul(&w)?;
        for row in 0..y.rows() {
            for (v, b) in y.row_mut(row).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests;
