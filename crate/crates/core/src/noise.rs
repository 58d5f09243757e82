//! Latent noising `z' = (1 − t)·z + t·n`, `n ~ γ·N(0, I)`, its logit-normal
//! time sampler, and the SNR algebra that maps interpolation times to
//! signal-to-noise ratios.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, shape_err, Error, Result};
use crate::numerics::rng::seeded;
use crate::numerics::{sigmoid, Tensor};

/// Logit-normal time distribution `t = sigmoid(ε)`, `ε ~ N(m, s²)`, plus
/// the noise scale `γ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub m: f64,
    pub s: f64,
    pub gamma: f64,
}

impl Default for NoiseSchedule {
    /// Main autoencoder configuration: LayerNorm bottleneck, `m = −1`.
    fn default() -> Self {
        Self {
            m: -1.0,
            s: 1.0,
            gamma: 1.0,
        }
    }
}

impl NoiseSchedule {
    pub fn new(m: f64, s: f64, gamma: f64) -> Result<Self> {
        let sched = Self { m, s, gamma };
        sched.validate()?;
        Ok(sched)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.m.is_finite() {
            return invalid("schedule location must be finite");
        }
        if !(self.s > 0.0 && self.s.is_finite()) {
            return invalid(format!("schedule scale must be > 0, got {}", self.s));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return invalid(format!("noise scale must be > 0, got {}", self.gamma));
        }
        Ok(())
    }

    /// Draws `t` strictly inside (0, 1).
    pub fn sample_t<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let eps: f64 = self.m + self.s * rng.sample::<f64, _>(StandardNormal);
        sigmoid(eps).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
    }

    /// Logit-normal CDF at `t`.
    pub fn cdf(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        if t >= 1.0 {
            return 1.0;
        }
        let logit = (t / (1.0 - t)).ln();
        crate::stats::normal_cdf((logit - self.m) / self.s)
    }
}

/// A noised latent together with what is needed to regenerate it.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisedLatent {
    pub z_prime: Tensor,
    pub t: f64,
    pub noise_seed: u64,
}

/// `γ·N(0, I)` noise of the given shape from a recorded seed.
pub fn draw_noise(shape: &[usize], gamma: f64, noise_seed: u64) -> Tensor {
    Tensor::randn(shape, gamma, &mut seeded(noise_seed))
}

/// Row-wise mixture `(1 − tᵢ)·zᵢ + tᵢ·nᵢ`. The single kernel behind every
/// noising path, so all of them agree bit for bit.
pub fn mix_rows(z: &Tensor, t_rows: &[f64], noise: &Tensor) -> Result<Tensor> {
    if z.shape() != noise.shape() {
        return shape_err(format!("latent {:?} vs noise {:?}", z.shape(), noise.shape()));
    }
    if z.rows() != t_rows.len() {
        return shape_err(format!("{} times for {} rows", t_rows.len(), z.rows()));
    }
    let c = z.cols();
    let mut out = Vec::with_capacity(z.len());
    for (i, &t) in t_rows.iter().enumerate() {
        let keep = 1.0 - t;
        for (zv, nv) in z.row(i).iter().zip(noise.row(i)) {
            out.push(keep * zv + t * nv);
        }
    }
    debug_assert_eq!(out.len(), z.rows() * c);
    Tensor::new(z.shape().to_vec(), out)
}

fn check_t(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        invalid(format!("t = {t} outside [0, 1]"))
    }
}

/// Noises `z` at time `t`, drawing a fresh noise seed from `rng`.
pub fn noise_latents<R: Rng + ?Sized>(z: &Tensor, t: f64, gamma: f64, rng: &mut R) -> Result<NoisedLatent> {
    noise_latents_seeded(z, t, gamma, rng.random())
}

/// Noises `z` at time `t` with noise regenerated from `noise_seed`.
pub fn noise_latents_seeded(z: &Tensor, t: f64, gamma: f64, noise_seed: u64) -> Result<NoisedLatent> {
    check_t(t)?;
    let noise = draw_noise(z.shape(), gamma, noise_seed);
    let ts = vec![t; z.rows()];
    Ok(NoisedLatent {
        z_prime: mix_rows(z, &ts, &noise)?,
        t,
        noise_seed,
    })
}

/// Expected SNR of the mixture at time `t`:
/// `(1 − t)²·E[z²] / (t²·γ²)`; `+∞` at `t = 0`.
pub fn snr_of_t(t: f64, z_power: f64, gamma: f64) -> Result<f64> {
    check_t(t)?;
    if !(z_power > 0.0) {
        return invalid("signal power must be positive");
    }
    if t == 0.0 {
        return Ok(f64::INFINITY);
    }
    let ratio = (1.0 - t) / t;
    Ok(ratio * ratio * z_power / (gamma * gamma))
}

/// SNR of the pure-noise endpoint convention, `E[z²]/γ²`.
pub fn endpoint_snr(z_power: f64, gamma: f64) -> f64 {
    z_power / (gamma * gamma)
}

/// Inverse of [`snr_of_t`]: `t = 1 / (1 + γ·√(snr / E[z²]))`.
pub fn t_of_snr(snr: f64, z_power: f64, gamma: f64) -> Result<f64> {
    if snr.is_nan() || snr < 0.0 {
        return invalid(format!("snr must be ≥ 0, got {snr}"));
    }
    if !(z_power > 0.0) {
        return invalid("signal power must be positive");
    }
    if snr.is_infinite() {
        return Ok(0.0);
    }
    let ratio = (snr / z_power).sqrt() * gamma;
    Ok(1.0 / (1.0 + ratio))
}

/// Per-bin SNR of a noised signal whose clean power spectral density is
/// `signal_psd`, against white noise of density `γ²`.
///
/// `signal_psd` uses density normalization: white noise of variance σ²
/// has flat density σ² in every bin.
pub fn spectral_snr_profile(signal_psd: &[f64], t: f64, gamma: f64) -> Result<Vec<f64>> {
    check_t(t)?;
    if signal_psd.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return invalid("psd values must be finite and ≥ 0");
    }
    if signal_psd.iter().all(|&p| p == 0.0) {
        return Err(Error::Degenerate("all-zero psd".into()));
    }
    let noise = t * t * gamma * gamma;
    let keep = (1.0 - t) * (1.0 - t);
    Ok(signal_psd
        .iter()
        .map(|&p| {
            if noise == 0.0 {
                if p > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                }
            } else {
                keep * p / noise
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{Purpose, RngStreams};

    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
    }

    #[test]
    fn sample_t_medians() {
        let mut rng = RngStreams::new(1).stream(Purpose::Noise);
        let centered = NoiseSchedule::new(0.0, 1.0, 1.0).unwrap();
        let draws: Vec<f64> = (0..100_000).map(|_| centered.sample_t(&mut rng)).collect();
        assert!(draws.iter().all(|&t| t > 0.0 && t < 1.0));
        assert!((median(draws) - 0.5).abs() < 0.01);

        let shifted = NoiseSchedule::new(-2.0, 1.0, 1.0).unwrap();
        let draws: Vec<f64> = (0..100_000).map(|_| shifted.sample_t(&mut rng)).collect();
        assert!((median(draws) - sigmoid(-2.0)).abs() < 0.01);
    }

    #[test]
    fn degenerate_scale_concentrates() {
        let mut rng = RngStreams::new(2).stream(Purpose::Noise);
        let s = NoiseSchedule::new(0.0, 1e-12, 1.0).unwrap();
        for _ in 0..100 {
            assert!((s.sample_t(&mut rng) - 0.5).abs() < 1e-9);
        }
        assert!(NoiseSchedule::new(0.0, 0.0, 1.0).is_err());
        assert!(NoiseSchedule::new(0.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn logit_normal_ks_statistic() {
        let mut rng = RngStreams::new(3).stream(Purpose::Noise);
        let s = NoiseSchedule::new(-1.0, 1.0, 1.0).unwrap();
        let mut draws: Vec<f64> = (0..100_000).map(|_| s.sample_t(&mut rng)).collect();
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = draws.len() as f64;
        let ks = draws
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let f = s.cdf(t);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.01, "ks = {ks}");
    }

    #[test]
    fn noising_endpoints() {
        let mut rng = RngStreams::new(4).stream(Purpose::Data);
        let z = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let clean = noise_latents_seeded(&z, 0.0, 1.0, 9).unwrap();
        assert_eq!(clean.z_prime, z);
        let pure = noise_latents_seeded(&z, 1.0, 1.0, 9).unwrap();
        assert_eq!(pure.z_prime, draw_noise(z.shape(), 1.0, 9));
        let other = Tensor::randn(&[4, 6], 3.0, &mut rng);
        assert_eq!(noise_latents_seeded(&other, 1.0, 1.0, 9).unwrap().z_prime, pure.z_prime);
        assert!(noise_latents_seeded(&z, 1.5, 1.0, 9).is_err());
        assert!(noise_latents_seeded(&z, -0.1, 1.0, 9).is_err());
    }

    #[test]
    fn mixture_variance_at_half() {
        let mut rng = RngStreams::new(5).stream(Purpose::Data);
        let z = Tensor::randn(&[1000, 100], 1.0, &mut rng);
        let zp = noise_latents(&z, 0.5, 1.0, &mut rng).unwrap().z_prime;
        let mean = zp.mean();
        let var = zp.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / zp.len() as f64;
        assert!((var - 0.5).abs() < 0.01, "var = {var}");
    }

    #[test]
    fn noising_is_reproducible_from_seed() {
        let mut rng = RngStreams::new(6).stream(Purpose::Data);
        let z = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let a = noise_latents(&z, 0.3, 1.0, &mut rng).unwrap();
        let b = noise_latents_seeded(&z, a.t, 1.0, a.noise_seed).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mixture_is_linear_in_signal() {
        let mut rng = RngStreams::new(8).stream(Purpose::Data);
        let z = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let alpha = 2.5;
        let t = 0.4;
        let scaled = z.map(|v| alpha * v);
        let a = noise_latents_seeded(&scaled, t, 1.0, 77).unwrap().z_prime;
        let b = noise_latents_seeded(&Tensor::zeros(z.shape()), t, 1.0, 77).unwrap().z_prime;
        for ((x, y), zv) in a.data().iter().zip(b.data()).zip(z.data()) {
            assert!(((x - y) - alpha * (1.0 - t) * zv).abs() < 1e-12);
        }
    }

    #[test]
    fn snr_values() {
        assert_eq!(snr_of_t(0.0, 1.0, 1.0).unwrap(), f64::INFINITY);
        assert!((snr_of_t(1.0 / 3.0, 1.0, 1.0).unwrap() - 4.0).abs() < 1e-12);
        assert!((snr_of_t(0.5, 1.0, 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(snr_of_t(1.0, 1.0, 1.0).unwrap(), 0.0);
        assert_eq!(t_of_snr(f64::INFINITY, 1.0, 1.0).unwrap(), 0.0);
        assert!((t_of_snr(4.0, 1.0, 1.0).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((t_of_snr(0.25, 1.0, 1.0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(t_of_snr(-1.0, 1.0, 1.0).is_err());
        assert_eq!(endpoint_snr(2.0, 1.0), 2.0);
    }

    #[test]
    fn snr_is_monotone() {
        let ts: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
        for w in ts.windows(2) {
            assert!(snr_of_t(w[0], 1.3, 0.7).unwrap() > snr_of_t(w[1], 1.3, 0.7).unwrap());
        }
        let qs: Vec<f64> = (-6..=6).map(|e| 10f64.powi(e)).collect();
        for w in qs.windows(2) {
            assert!(t_of_snr(w[0], 1.3, 0.7).unwrap() > t_of_snr(w[1], 1.3, 0.7).unwrap());
        }
    }

    #[test]
    fn white_signal_against_white_noise() {
        let gamma: f64 = 1.3;
        let t = 0.25;
        let prof = spectral_snr_profile(&vec![gamma * gamma; 16], t, gamma).unwrap();
        let want = ((1.0 - t) / t).powi(2);
        for p in prof {
            assert!((p - want).abs() < 1e-12);
        }
    }

    #[test]
    fn power_law_crossing_frequency() {
        let c = 400.0;
        let freqs: Vec<f64> = (1..=1000).map(|k| k as f64 * 0.1).collect();
        let psd: Vec<f64> = freqs.iter().map(|f| c / (f * f)).collect();
        let prof = spectral_snr_profile(&psd, 0.5, 1.0).unwrap();
        let k = prof.iter().position(|&s| s < 1.0).unwrap();
        // Interpolate log SNR linearly in log f between the bracketing bins.
        let (f0, f1) = (freqs[k - 1].ln(), freqs[k].ln());
        let (s0, s1) = (prof[k - 1].ln(), prof[k].ln());
        let crossing = (f0 + (0.0 - s0) * (f1 - f0) / (s1 - s0)).exp();
        assert!((crossing - psd[9].sqrt()).abs() < 1e-9, "{crossing}");
    }

    #[test]
    fn clean_limit_is_infinite() {
        let prof = spectral_snr_profile(&[1.0, 0.0, 2.0], 0.0, 1.0).unwrap();
        assert_eq!(prof, vec![f64::INFINITY, 0.0, f64::INFINITY]);
        let tiny = spectral_snr_profile(&[1.0, 2.0], 1e-9, 1.0).unwrap();
        assert!(tiny.iter().all(|&s| s > 1e17));
        assert!(spectral_snr_profile(&[0.0, 0.0], 0.5, 1.0).is_err());
    }
}
