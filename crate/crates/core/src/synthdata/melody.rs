use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use super::random_orthonormal;
use crate::error::{invalid, Error, Result};
use crate::numerics::rng::seeded;
use crate::numerics::Tensor;

/// First-order Markov chain over pitch indices.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovChain {
    n: usize,
    transition: Vec<f64>,
    stationary: Vec<f64>,
}

impl MarkovChain {
    /// Rows must be non-negative and sum to 1 within 1e-12.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return invalid("empty transition matrix");
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return invalid(format!("transition row {i} has {} entries, need {n}", row.len()));
            }
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return invalid(format!("transition row {i} has a negative or non-finite entry"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return invalid(format!("transition row {i} sums to {s}"));
            }
        }
        let transition: Vec<f64> = rows.into_iter().flatten().collect();
        let stationary = stationary_distribution(n, &transition);
        Ok(Self {
            n,
            transition,
            stationary,
        })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![vec![1.0 / n as f64; n]; n])
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::new(
            (0..n)
                .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
        )
    }

    /// Rows drawn from a symmetric Dirichlet(`alpha`) and mixed with the
    /// uniform row: `(1 − floor)·dirichlet + floor/n`.
    pub fn sample_dirichlet<R: Rng + ?Sized>(n: usize, alpha: f64, floor: f64, rng: &mut R) -> Result<Self> {
        if n == 0 || !(alpha > 0.0) || !(0.0..=1.0).contains(&floor) {
            return invalid(format!("Dirichlet chain with n={n}, alpha={alpha}, floor={floor}"));
        }
        let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let mut g: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
            let mut s: f64 = g.iter().sum();
            if s <= 0.0 {
                g = vec![1.0; n];
                s = n as f64;
            }
            let mut row: Vec<f64> = g.iter().map(|v| (1.0 - floor) * v / s + floor / n as f64).collect();
            // Put the rounding residue on the largest entry.
            let resid = 1.0 - row.iter().sum::<f64>();
            let imax = (0..n).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
            row[imax] += resid;
            rows.push(row);
        }
        Self::new(rows)
    }

    pub fn n_states(&self) -> usize {
        self.n
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.transition[from * self.n + to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.transition[from * self.n..(from + 1) * self.n]
    }

    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    /// Path of `len` states; the first comes from the stationary law.
    pub fn sample_path<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<usize> {
        let mut path = Vec::with_capacity(len);
        let mut probs = self.stationary.as_slice();
        for _ in 0..len {
            let s = sample_index(probs, rng);
            path.push(s);
            probs = self.row(s);
        }
        path
    }
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap; take the last state with mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Stationary law by iterating the lazy chain `(I + P)/2` from uniform.
fn stationary_distribution(n: usize, p: &[f64]) -> Vec<f64> {
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..100_000 {
        let mut next = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                next[j] += pi[i] * p[i * n + j];
            }
        }
        let mut delta: f64 = 0.0;
        for j in 0..n {
            next[j] = 0.5 * (pi[j] + next[j]);
            delta = delta.max((next[j] - pi[j]).abs());
        }
        let s: f64 = next.iter().sum();
        pi = next.into_iter().map(|v| v / s).collect();
        if delta < 1e-16 {
            break;
        }
    }
    pi
}

/// Information content of every note: `−ln P(p_i | p_{i−1})`, with the
/// stationary law for the first note.
pub fn oracle_ic(chain: &MarkovChain, pitches: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pitches.len());
    for (i, &p) in pitches.iter().enumerate() {
        if p >= chain.n_states() {
            return invalid(format!("pitch {p} out of range at note {i}"));
        }
        let prob = if i == 0 {
            chain.stationary()[p]
        } else {
            chain.prob(pitches[i - 1], p)
        };
        if prob <= 0.0 {
            return Err(Error::Degenerate(format!(
                "zero-probability transition into pitch {p} at note {i}"
            )));
        }
        out.push(-prob.ln());
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Construction {
    /// Pitch in a high-power subspace, nuisance in a low-power one.
    Aligned,
    /// Same content with equal per-dimension power, then randomly rotated.
    Unaligned,
}

/// Latent "melody" frames: a pitch embedding plus nuisance noise.
///
/// Pitch `p` maps to `±e_{p mod d_p}` in the first `d_p` coordinates (sign
/// negative for `p ≥ d_p`); the remaining coordinates carry nuisance noise.
#[derive(Clone, Debug, PartialEq)]
pub struct MelodySpec {
    pub chain: MarkovChain,
    /// Notes per sequence.
    pub seq_len: usize,
    pub frames_per_note: usize,
    pub latent_dim: usize,
    pub pitch_dim: usize,
    pub construction: Construction,
    /// Amplitude of the pitch embedding.
    pub pitch_power: f64,
    /// Standard deviation of the nuisance noise per coordinate.
    pub nuisance_power: f64,
    pub rotation_seed: u64,
}

impl MelodySpec {
    /// 8 pitches, 8 latent dimensions with a 4-dimensional pitch subspace,
    /// pitch amplitude 1 and nuisance std 0.25.
    pub fn standard(chain: MarkovChain, construction: Construction, rotation_seed: u64) -> Self {
        Self {
            chain,
            seq_len: 32,
            frames_per_note: 1,
            latent_dim: 8,
            pitch_dim: 4,
            construction,
            pitch_power: 1.0,
            nuisance_power: 0.25,
            rotation_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.chain.n_states();
        if self.pitch_dim == 0 || self.pitch_dim >= self.latent_dim {
            return invalid("pitch subspace must be a proper, non-empty subspace");
        }
        if n < self.pitch_dim || n > 2 * self.pitch_dim {
            return invalid(format!("{n} pitches do not fit a {}-dim ± embedding", self.pitch_dim));
        }
        if self.seq_len == 0 || self.frames_per_note == 0 {
            return invalid("sequences need at least one note and one frame per note");
        }
        if !(self.nuisance_power > 0.0 && self.pitch_power > self.nuisance_power && self.pitch_power.is_finite()) {
            return invalid("need pitch_power > nuisance_power > 0");
        }
        Ok(())
    }

    pub fn frames_per_seq(&self) -> usize {
        self.seq_len * self.frames_per_note
    }

    /// Total per-frame power before the final normalization.
    fn raw_power(&self) -> f64 {
        self.pitch_power.powi(2) + (self.latent_dim - self.pitch_dim) as f64 * self.nuisance_power.powi(2)
    }

    /// Fixed linear map from frames back to the unit pitch embedding: the
    /// pitch coordinates of `frame·recovery` are `±1` on the active axis.
    pub fn embedding(&self) -> Result<Embedding> {
        self.validate()?;
        let (ld, pd) = (self.latent_dim, self.pitch_dim);
        let scale = (ld as f64 / self.raw_power()).sqrt();
        match self.construction {
            Construction::Aligned => Ok(Embedding {
                pitch_amp: vec![scale * self.pitch_power; pd],
                nuisance_std: scale * self.nuisance_power,
                rotation: None,
            }),
            Construction::Unaligned => {
                let per_dim = self.raw_power() / ld as f64;
                let pi = self.chain.stationary();
                let pitch_amp = (0..pd)
                    .map(|j| {
                        let mass = pi[j] + pi.get(j + pd).copied().unwrap_or(0.0);
                        if mass > 0.0 {
                            scale * (per_dim / mass).sqrt()
                        } else {
                            scale * per_dim.sqrt()
                        }
                    })
                    .collect();
                let rotation = random_orthonormal(ld, ld, &mut seeded(self.rotation_seed))?;
                Ok(Embedding {
                    pitch_amp,
                    nuisance_std: scale * per_dim.sqrt(),
                    rotation: Some(rotation),
                })
            }
        }
    }
}

/// Resolved amplitudes and rotation of a [`MelodySpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub pitch_amp: Vec<f64>,
    pub nuisance_std: f64,
    /// Applied as `frame ← frame·Rᵀ` when present.
    pub rotation: Option<Tensor>,
}

impl Embedding {
    /// Unrotated frame for a pitch and nuisance draw.
    fn frame(&self, pitch: usize, nuisance: &[f64], out: &mut [f64]) {
        let pd = self.pitch_amp.len();
        out.iter_mut().for_each(|v| *v = 0.0);
        let axis = pitch % pd;
        let sign = if pitch < pd { 1.0 } else { -1.0 };
        out[axis] = sign * self.pitch_amp[axis];
        for (o, n) in out[pd..].iter_mut().zip(nuisance) {
            *o = self.nuisance_std * n;
        }
    }

    /// `[latent_dim, pitch_dim]` map with `frame·M = ±e_axis` for a
    /// nuisance-free frame.
    pub fn recovery(&self, latent_dim: usize) -> Result<Tensor> {
        let pd = self.pitch_amp.len();
        let mut m = Tensor::zeros(&[latent_dim, pd]);
        for j in 0..pd {
            m.data_mut()[j * pd + j] = 1.0 / self.pitch_amp[j];
        }
        match &self.rotation {
            // frame = raw·Rᵀ, so raw = frame·R.
            Some(r) => r.matmul(&m),
            None => Ok(m),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MelodyBatch {
    /// One `[frames, latent_dim]` tensor per sequence.
    pub latents: Vec<Tensor>,
    /// Pitch of every note, per sequence.
    pub pitches: Vec<Vec<usize>>,
    pub frames_per_note: usize,
}

pub fn gen_melody_latents<R: Rng + ?Sized>(spec: &MelodySpec, n_seqs: usize, rng: &mut R) -> Result<MelodyBatch> {
    let emb = spec.embedding()?;
    let (ld, pd) = (spec.latent_dim, spec.pitch_dim);
    let mut latents = Vec::with_capacity(n_seqs);
    let mut pitches = Vec::with_capacity(n_seqs);
    let mut raw = vec![0.0; ld];
    let mut nuisance = vec![0.0; ld - pd];
    for _ in 0..n_seqs {
        let path = spec.chain.sample_path(spec.seq_len, rng);
        let mut frames = Vec::with_capacity(spec.frames_per_seq() * ld);
        for &p in &path {
            for _ in 0..spec.frames_per_note {
                nuisance.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
                emb.frame(p, &nuisance, &mut raw);
                match &emb.rotation {
                    Some(r) => frames.extend((0..ld).map(|i| {
                        r.row(i).iter().zip(&raw).map(|(a, b)| a * b).sum::<f64>()
                    })),
                    None => frames.extend_from_slice(&raw),
                }
            }
        }
        latents.push(Tensor::matrix(spec.frames_per_seq(), ld, frames)?);
        pitches.push(path);
    }
    Ok(MelodyBatch {
        latents,
        pitches,
        frames_per_note: spec.frames_per_note,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{Purpose, RngStreams};

    fn chain(seed: u64) -> MarkovChain {
        MarkovChain::sample_dirichlet(8, 0.5, 0.05, &mut seeded(seed)).unwrap()
    }

    fn per_dim_power(batch: &MelodyBatch, ld: usize) -> Vec<f64> {
        let mut p = vec![0.0; ld];
        let mut n = 0usize;
        for seq in &batch.latents {
            for row in seq.data().chunks(ld) {
                for (a, v) in p.iter_mut().zip(row) {
                    *a += v * v;
                }
                n += 1;
            }
        }
        p.into_iter().map(|v| v / n as f64).collect()
    }

    #[test]
    fn ic_examples() {
        let id = MarkovChain::identity(4).unwrap();
        let ic = oracle_ic(&id, &[2, 2, 2, 2]).unwrap();
        assert!(ic[1..].iter().all(|&v| v == 0.0));
        assert!(oracle_ic(&id, &[2, 3]).is_err());

        let uni = MarkovChain::uniform(4).unwrap();
        for v in oracle_ic(&uni, &[0, 3, 1, 1, 2]).unwrap() {
            assert!((v - 4f64.ln()).abs() < 1e-12);
        }

        let two = MarkovChain::new(vec![vec![0.9, 0.1], vec![0.5, 0.5]]).unwrap();
        let ic = oracle_ic(&two, &[0, 1]).unwrap();
        assert!((ic[1] - 10f64.ln()).abs() < 1e-12);
        assert!(oracle_ic(&two, &[0, 2]).is_err());
    }

    #[test]
    fn rejects_non_stochastic_rows() {
        assert!(MarkovChain::new(vec![vec![0.5, 0.6], vec![0.5, 0.5]]).is_err());
        assert!(MarkovChain::new(vec![vec![1.5, -0.5], vec![0.5, 0.5]]).is_err());
        assert!(MarkovChain::new(vec![vec![1.0]; 2]).is_err());
        let c = chain(1);
        for i in 0..8 {
            assert!((c.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn stationary_law_is_invariant() {
        let c = chain(2);
        let pi = c.stationary();
        for j in 0..8 {
            let next: f64 = (0..8).map(|i| pi[i] * c.prob(i, j)).sum();
            assert!((next - pi[j]).abs() < 1e-12);
        }
        // Periodic chain still converges under the lazy iteration.
        let flip = MarkovChain::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!((flip.stationary()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn identity_chain_gives_constant_path() {
        let mut spec = MelodySpec::standard(MarkovChain::identity(8).unwrap(), Construction::Aligned, 0);
        spec.seq_len = 20;
        let batch = gen_melody_latents(&spec, 5, &mut seeded(3)).unwrap();
        for p in &batch.pitches {
            assert!(p.iter().all(|&v| v == p[0]));
        }
    }

    #[test]
    fn empirical_ic_matches_oracle() {
        let c = chain(4);
        let mut rng = RngStreams::new(4).stream(Purpose::Data);
        let path = c.sample_path(100_001, &mut rng);
        let mut counts = vec![0.0f64; 64];
        let mut from = [0.0; 8];
        for w in path.windows(2) {
            counts[w[0] * 8 + w[1]] += 1.0;
            from[w[0]] += 1.0;
        }
        let oracle = oracle_ic(&c, &path).unwrap();
        let oracle_mean = oracle[1..].iter().sum::<f64>() / 100_000.0;
        let empirical = path
            .windows(2)
            .map(|w| -(counts[w[0] * 8 + w[1]] / from[w[0]]).ln())
            .sum::<f64>()
            / 100_000.0;
        assert!((empirical / oracle_mean - 1.0).abs() < 0.02, "{empirical} vs {oracle_mean}");
    }

    #[test]
    fn aligned_power_split() {
        let mut spec = MelodySpec::standard(chain(5), Construction::Aligned, 0);
        spec.seq_len = 100;
        let batch = gen_melody_latents(&spec, 100, &mut seeded(6)).unwrap();
        let p = per_dim_power(&batch, 8);
        let total: f64 = p.iter().sum();
        let ratio = p[..4].iter().sum::<f64>() / total;
        let want = spec.pitch_power.powi(2) / spec.raw_power();
        assert!((ratio / want - 1.0).abs() < 0.02, "{ratio} vs {want}");
        assert!((total / 8.0 - 1.0).abs() < 0.02);
    }

    #[test]
    fn unaligned_power_is_uniform() {
        let mut spec = MelodySpec::standard(chain(5), Construction::Unaligned, 11);
        spec.seq_len = 100;
        let batch = gen_melody_latents(&spec, 100, &mut seeded(6)).unwrap();
        let p = per_dim_power(&batch, 8);
        let mean = p.iter().sum::<f64>() / 8.0;
        assert!((mean - 1.0).abs() < 0.05);
        for v in p {
            assert!((v / mean - 1.0).abs() < 0.05, "{v} vs {mean}");
        }
    }

    #[test]
    fn pitch_is_linearly_recoverable_in_both_constructions() {
        for construction in [Construction::Aligned, Construction::Unaligned] {
            let mut spec = MelodySpec::standard(chain(7), construction, 2);
            // Shrinking the nuisance to a negligible level isolates the pitch part.
            spec.nuisance_power = 1e-12;
            let emb = spec.embedding().unwrap();
            let m = emb.recovery(8).unwrap();
            let batch = gen_melody_latents(&spec, 3, &mut seeded(8)).unwrap();
            for (seq, path) in batch.latents.iter().zip(&batch.pitches) {
                let rec = seq.matmul(&m).unwrap();
                for (row, &p) in rec.data().chunks(4).zip(path) {
                    for (j, v) in row.iter().enumerate() {
                        let want = if j == p % 4 { if p < 4 { 1.0 } else { -1.0 } } else { 0.0 };
                        assert!((v - want).abs() < 1e-9, "{construction:?}: {v} vs {want}");
                    }
                }
            }
        }
    }
}
