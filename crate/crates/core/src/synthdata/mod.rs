//! Synthetic generators with known ground truth.

mod eeg;
mod melody;

pub use eeg::{
    gen_stimulus, gen_synthetic_eeg, pink_noise, Kernel, ChannelKernels, EegData, Stimulus, StimulusSpec,
    SyntheticEegSpec, TrialPredictors,
};
pub use melody::{
    gen_melody_latents, oracle_ic, Construction, MarkovChain, MelodyBatch, MelodySpec,
};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autoencoder::PerceptualWeights;
use crate::error::{invalid, Result};
use crate::metrics::FeatureMap;
use crate::numerics::rng::seeded;
use crate::numerics::Tensor;

/// `[rows, cols]` matrix with orthonormal columns, from Gram–Schmidt on a
/// Gaussian draw (two passes for round-off).
pub fn random_orthonormal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<Tensor> {
    if cols == 0 || cols > rows {
        return invalid(format!("cannot fit {cols} orthonormal columns in dimension {rows}"));
    }
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while q.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for u in &q {
                let d: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= d * ui;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        q.push(v);
    }
    let mut data = vec![0.0; rows * cols];
    for (j, col) in q.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            data[i * cols + j] = *v;
        }
    }
    Tensor::matrix(rows, cols, data)
}

/// Signals built as sums of `K` orthonormal feature groups with
/// independent Gaussian coefficients.
///
/// The groups span a `K·group_dim` subspace of an `input_dim`-dimensional
/// signal space.
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchicalSpec {
    pub groups: usize,
    pub group_dim: usize,
    pub input_dim: usize,
    pub weights: PerceptualWeights,
    /// Coefficient standard deviation per group.
    pub coeff_std: Vec<f64>,
    /// Seed of the fixed basis.
    pub basis_seed: u64,
}

impl HierarchicalSpec {
    /// 8 single-direction groups in 64 dimensions, unit coefficient std,
    /// `w_k ∝ 1/k`.
    pub fn standard(basis_seed: u64) -> Self {
        let groups = 8;
        Self {
            groups,
            group_dim: 1,
            input_dim: 64,
            weights: PerceptualWeights::power_law(groups, 1.0).expect("valid exponent"),
            coeff_std: vec![1.0; groups],
            basis_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.group_dim == 0 {
            return invalid("need at least one group of at least one direction");
        }
        if self.groups * self.group_dim > self.input_dim {
            return invalid(format!(
                "{} groups of {} do not fit in dimension {}",
                self.groups, self.group_dim, self.input_dim
            ));
        }
        if self.weights.len() != self.groups || self.coeff_std.len() != self.groups {
            return invalid("weights and coefficient stds need one entry per group");
        }
        if self.coeff_std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return invalid("coefficient stds must be positive");
        }
        Ok(())
    }

    /// The fixed basis Φ as a feature map.
    pub fn feature_map(&self) -> Result<FeatureMap> {
        self.validate()?;
        let mut rng = seeded(self.basis_seed);
        let basis = random_orthonormal(self.input_dim, self.groups * self.group_dim, &mut rng)?;
        FeatureMap::new(basis, self.groups, self.group_dim)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierarchicalBatch {
    /// `[n, input_dim]` signals `x = Σ_k a_k·Φ_k`.
    pub x: Tensor,
    /// `[n, K·group_dim]` coefficients `a`, equal to `x·Φ`.
    pub coeffs: Tensor,
}

pub fn gen_hierarchical<R: Rng + ?Sized>(
    spec: &HierarchicalSpec,
    map: &FeatureMap,
    n: usize,
    rng: &mut R,
) -> Result<HierarchicalBatch> {
    spec.validate()?;
    if map.groups() != spec.groups || map.group_dim() != spec.group_dim || map.input_dim() != spec.input_dim {
        return invalid("feature map does not match the spec");
    }
    let width = spec.groups * spec.group_dim;
    let mut coeffs = Tensor::randn(&[n, width], 1.0, rng);
    for row in coeffs.data_mut().chunks_mut(width) {
        for (c, v) in row.iter_mut().enumerate() {
            *v *= spec.coeff_std[c / spec.group_dim];
        }
    }
    let x = coeffs.matmul(&map.basis().transpose()?)?;
    Ok(HierarchicalBatch { x, coeffs })
}
