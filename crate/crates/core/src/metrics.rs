//! Reconstruction and spectral metrics.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{invalid, shape_err, Error, Result};
use crate::numerics::Tensor;

/// Value reported for a perfect reconstruction.
pub const SI_SDR_CAP_DB: f64 = 200.0;

/// Scale-invariant signal-to-distortion ratio in dB.
///
/// `α = ⟨ŝ, s⟩/‖s‖²`, `SI-SDR = 10·log₁₀(‖αs‖² / ‖αs − ŝ‖²)`, capped at
/// [`SI_SDR_CAP_DB`]. Applied to plain vectors, not spectrograms.
pub fn si_sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return shape_err(format!(
            "reference of {} vs estimate of {}",
            reference.len(),
            estimate.len()
        ));
    }
    let ref_energy: f64 = reference.iter().map(|v| v * v).sum();
    let est_energy: f64 = estimate.iter().map(|v| v * v).sum();
    if ref_energy == 0.0 {
        return Err(Error::Degenerate("zero reference signal".into()));
    }
    if est_energy == 0.0 {
        return Err(Error::Degenerate("zero estimate".into()));
    }
    let alpha = reference.iter().zip(estimate).map(|(a, b)| a * b).sum::<f64>() / ref_energy;
    let target: f64 = alpha * alpha * ref_energy;
    let distortion: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(s, e)| (alpha * s - e).powi(2))
        .sum();
    if distortion <= target * 10f64.powf(-SI_SDR_CAP_DB / 10.0) {
        return Ok(SI_SDR_CAP_DB);
    }
    Ok((10.0 * (target / distortion).log10()).min(SI_SDR_CAP_DB))
}

/// Orthonormal projection onto `K` feature groups of `group_dim`
/// directions each.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    /// `[input_dim, K·group_dim]` with orthonormal columns; group `k` owns
    /// columns `k·group_dim .. (k+1)·group_dim`.
    basis: Tensor,
    groups: usize,
    group_dim: usize,
}

impl FeatureMap {
    pub fn new(basis: Tensor, groups: usize, group_dim: usize) -> Result<Self> {
        let (_, cols) = basis.dims2()?;
        if groups == 0 || group_dim == 0 || cols != groups * group_dim {
            return shape_err(format!(
                "basis with {cols} columns for {groups} groups of {group_dim}"
            ));
        }
        Ok(Self {
            basis,
            groups,
            group_dim,
        })
    }

    pub fn basis(&self) -> &Tensor {
        &self.basis
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn group_dim(&self) -> usize {
        self.group_dim
    }

    pub fn input_dim(&self) -> usize {
        self.basis.rows()
    }

    /// Coefficients `x·Φ`, one row per example.
    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.basis)
    }

    /// Group of each projected column.
    pub fn column_groups(&self) -> Vec<usize> {
        (0..self.groups * self.group_dim).map(|c| c / self.group_dim).collect()
    }

    /// `‖ΦᵀΦ − I‖_max`.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self
            .basis
            .transpose()
            .and_then(|t| t.matmul(&self.basis))
            .expect("basis is a matrix");
        let n = gram.rows();
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| (gram.get2(i, j) - if i == j { 1.0 } else { 0.0 }).abs())
            .fold(0.0, f64::max)
    }
}

/// Squared error per feature group, summed over rows and divided by the
/// row count: `e_k = mean_rows ‖proj_k(x − x̂)‖²`.
pub fn group_error(x: &Tensor, x_hat: &Tensor, map: &FeatureMap) -> Result<Vec<f64>> {
    if x.shape() != x_hat.shape() {
        return shape_err(format!("{:?} vs {:?}", x.shape(), x_hat.shape()));
    }
    let diff = x.zip_map(x_hat, |a, b| a - b)?;
    let coeffs = map.project(&diff)?;
    let mut err = vec![0.0; map.groups()];
    let cols = coeffs.cols();
    for row in coeffs.data().chunks(cols) {
        for (c, v) in row.iter().enumerate() {
            err[c / map.group_dim()] += v * v;
        }
    }
    let rows = x.rows().max(1) as f64;
    Ok(err.into_iter().map(|e| e / rows).collect())
}

/// Weighted sum of group errors.
pub fn weighted_error(group_errors: &[f64], weights: &[f64]) -> f64 {
    group_errors.iter().zip(weights).map(|(e, w)| e * w).sum()
}

/// One-sided periodogram averaged over non-overlapping rectangular frames
/// of `n_fft` samples. Bins `0..=n_fft/2`; the bins sum to the mean
/// squared amplitude of the analyzed samples.
pub fn psd(signal: &[f64], n_fft: usize) -> Result<Vec<f64>> {
    if n_fft == 0 || n_fft > signal.len() {
        return invalid(format!("n_fft {n_fft} for {} samples", signal.len()));
    }
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let frames = signal.len() / n_fft;
    let bins = n_fft / 2 + 1;
    let mut power = vec![0.0; bins];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for frame in signal.chunks_exact(n_fft) {
        for (b, &s) in buf.iter_mut().zip(frame) {
            *b = Complex::new(s, 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            let two_sided = k != 0 && !(n_fft % 2 == 0 && k == n_fft / 2);
            let factor = if two_sided { 2.0 } else { 1.0 };
            *p += factor * buf[k].norm_sqr();
        }
    }
    let norm = (n_fft * n_fft * frames) as f64;
    Ok(power.into_iter().map(|p| p / norm).collect())
}

/// Shared FFT planner for repeated transforms of one length.
pub(crate) fn fft_pair(n: usize) -> (Arc<dyn rustfft::Fft<f64>>, Arc<dyn rustfft::Fft<f64>>) {
    let mut planner = FftPlanner::new();
    (planner.plan_fft_forward(n), planner.plan_fft_inverse(n))
}
