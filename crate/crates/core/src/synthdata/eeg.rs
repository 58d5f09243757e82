use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;

use crate::error::{invalid, shape_err, Result};
use crate::metrics::fft_pair;
use crate::numerics::Tensor;

/// Note timing for the stimulus of one trial.
#[derive(Clone, Debug, PartialEq)]
pub struct StimulusSpec {
    /// Predictor and response rate, Hz.
    pub frame_rate: f64,
    /// Audio samples per frame.
    pub oversample: usize,
    /// Note duration range, seconds.
    pub note_secs: (f64, f64),
    /// Probability that a note is followed by a rest.
    pub rest_prob: f64,
    pub rest_secs: (f64, f64),
    /// Fundamental of pitch 0, Hz; each pitch step multiplies by 2^(1/8).
    pub base_freq: f64,
}

impl Default for StimulusSpec {
    fn default() -> Self {
        Self {
            frame_rate: 64.0,
            oversample: 8,
            note_secs: (0.25, 0.5),
            rest_prob: 0.15,
            rest_secs: (0.125, 0.375),
            base_freq: 60.0,
        }
    }
}

impl StimulusSpec {
    pub fn audio_rate(&self) -> f64 {
        self.frame_rate * self.oversample as f64
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.frame_rate > 0.0
            && self.oversample >= 1
            && 0.0 < self.note_secs.0
            && self.note_secs.0 <= self.note_secs.1
            && 0.0 < self.rest_secs.0
            && self.rest_secs.0 <= self.rest_secs.1
            && (0.0..1.0).contains(&self.rest_prob)
            && self.base_freq > 0.0;
        if !ok {
            return invalid("bad stimulus spec");
        }
        if self.base_freq * 2.0 >= self.audio_rate() / 2.0 {
            return invalid("pitch range exceeds the audio Nyquist rate");
        }
        Ok(())
    }
}

/// One sounding note, in frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoteSpan {
    pub start: usize,
    pub len: usize,
    pub pitch: usize,
    pub loudness: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stimulus {
    pub notes: Vec<NoteSpan>,
    pub n_frames: usize,
    pub frame_rate: f64,
    pub audio_rate: f64,
    pub waveform: Vec<f64>,
}

impl Stimulus {
    /// Holds one value per note over the note's frames; rests are NaN and
    /// unvoiced in the returned mask.
    pub fn note_series(&self, values: &[f64]) -> Result<(Vec<f64>, Vec<bool>)> {
        if values.len() != self.notes.len() {
            return shape_err(format!("{} values for {} notes", values.len(), self.notes.len()));
        }
        let mut series = vec![f64::NAN; self.n_frames];
        let mut voiced = vec![false; self.n_frames];
        for (note, &v) in self.notes.iter().zip(values) {
            series[note.start..note.start + note.len].fill(v);
            voiced[note.start..note.start + note.len].fill(true);
        }
        Ok((series, voiced))
    }
}

/// Lays out a pitch sequence in time and synthesizes a decaying-tone
/// waveform with random per-note loudness.
pub fn gen_stimulus<R: Rng + ?Sized>(pitches: &[usize], spec: &StimulusSpec, rng: &mut R) -> Result<Stimulus> {
    spec.validate()?;
    let frames_of = |secs: f64| ((secs * spec.frame_rate).round() as usize).max(1);
    let mut notes = Vec::with_capacity(pitches.len());
    let mut cursor = 0usize;
    for &pitch in pitches {
        let len = frames_of(rng.random_range(spec.note_secs.0..=spec.note_secs.1));
        let loudness = rng.random_range(0.4..1.0);
        notes.push(NoteSpan {
            start: cursor,
            len,
            pitch,
            loudness,
        });
        cursor += len;
        if rng.random::<f64>() < spec.rest_prob {
            cursor += frames_of(rng.random_range(spec.rest_secs.0..=spec.rest_secs.1));
        }
    }
    let n_frames = cursor;
    let audio_rate = spec.audio_rate();
    let mut waveform = vec![0.0; n_frames * spec.oversample];
    for note in &notes {
        let f = spec.base_freq * 2f64.powf(note.pitch as f64 / 8.0);
        let start = note.start * spec.oversample;
        for i in 0..note.len * spec.oversample {
            let tau = i as f64 / audio_rate;
            let amp = note.loudness * (1.0 - (-tau / 0.01).exp()) * (-tau / 0.25).exp();
            waveform[start + i] = amp * (2.0 * std::f64::consts::PI * f * tau).sin();
        }
    }
    Ok(Stimulus {
        notes,
        n_frames,
        frame_rate: spec.frame_rate,
        audio_rate,
        waveform,
    })
}

/// FIR response kernel: `y[n] = Σ_i taps[i]·x[n − start_lag − i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    pub start_lag: i64,
    pub taps: Vec<f64>,
}

impl Kernel {
    pub fn zero() -> Self {
        Self {
            start_lag: 0,
            taps: vec![],
        }
    }

    /// Positive lobe at `peak_ms` minus a broader lobe at twice the
    /// latency, sampled over lags 0..500 ms.
    pub fn biphasic(rate: f64, peak_ms: f64, amplitude: f64) -> Self {
        let n = (0.5 * rate).round() as usize + 1;
        let bump = |t: f64, mu: f64, sd: f64| (-(t - mu).powi(2) / (2.0 * sd * sd)).exp();
        let taps = (0..n)
            .map(|i| {
                let t = i as f64 / rate * 1000.0;
                amplitude * (bump(t, peak_ms, 35.0) - 0.6 * bump(t, 2.0 * peak_ms, 60.0))
            })
            .collect();
        Self { start_lag: 0, taps }
    }

    /// Lag range in milliseconds, `None` for an empty kernel.
    pub fn support_ms(&self, rate: f64) -> Option<(f64, f64)> {
        if self.taps.is_empty() {
            return None;
        }
        let first = self.start_lag as f64;
        let last = first + (self.taps.len() - 1) as f64;
        Some((first / rate * 1000.0, last / rate * 1000.0))
    }

    /// Causal-and-anticausal convolution with zero padding.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        let n = x.len() as i64;
        for (i, &w) in self.taps.iter().enumerate() {
            let lag = self.start_lag + i as i64;
            for (t, o) in out.iter_mut().enumerate() {
                let src = t as i64 - lag;
                if (0..n).contains(&src) {
                    *o += w * x[src as usize];
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelKernels {
    pub ic: Kernel,
    pub envelope: Kernel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticEegSpec {
    pub n_channels: usize,
    pub n_trials: usize,
    pub n_participants: usize,
    pub sample_rate: f64,
    pub kernels: Vec<ChannelKernels>,
    /// Channels whose response includes the IC term.
    pub coupled: Vec<usize>,
    /// Variance of the 1/f background per channel.
    pub noise_power: f64,
    /// Standard deviation of the log response gain across participants.
    pub participant_gain_sd: f64,
    /// Lag window the kernels must fit in, milliseconds.
    pub lag_window_ms: (f64, f64),
}

impl SyntheticEegSpec {
    /// 8 channels with the first 4 coupled, 20 participants, 18 trials at
    /// 64 Hz.
    pub fn standard(noise_power: f64) -> Self {
        let rate = 64.0;
        let n_channels = 8;
        let kernels = (0..n_channels)
            .map(|c| {
                let a = 1.0 - 0.08 * c as f64;
                ChannelKernels {
                    ic: Kernel::biphasic(rate, 150.0, a),
                    envelope: Kernel::biphasic(rate, 120.0, a),
                }
            })
            .collect();
        Self {
            n_channels,
            n_trials: 18,
            n_participants: 20,
            sample_rate: rate,
            kernels,
            coupled: (0..4).collect(),
            noise_power,
            participant_gain_sd: 0.2,
            lag_window_ms: (-100.0, 700.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_channels == 0 || self.n_trials == 0 || self.n_participants == 0 || !(self.sample_rate > 0.0) {
            return invalid("EEG spec needs channels, trials, participants and a positive rate");
        }
        if self.kernels.len() != self.n_channels {
            return invalid(format!("{} kernel sets for {} channels", self.kernels.len(), self.n_channels));
        }
        if let Some(c) = self.coupled.iter().find(|&&c| c >= self.n_channels) {
            return invalid(format!("coupled channel {c} does not exist"));
        }
        if !(self.noise_power >= 0.0 && self.noise_power.is_finite()) || !(self.participant_gain_sd >= 0.0) {
            return invalid("noise power and gain spread must be non-negative");
        }
        let (lo, hi) = self.lag_window_ms;
        for (c, k) in self.kernels.iter().enumerate() {
            for kernel in [&k.ic, &k.envelope] {
                if let Some((a, b)) = kernel.support_ms(self.sample_rate) {
                    if a < lo - 1e-9 || b > hi + 1e-9 {
                        return invalid(format!(
                            "channel {c} kernel spans {a}..{b} ms, outside the {lo}..{hi} ms window"
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// IC and envelope predictors of one trial, sampled at the EEG rate.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialPredictors {
    pub ic: Vec<f64>,
    pub envelope: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EegData {
    /// `[participant][trial]` responses of shape `[samples, channels]`.
    pub responses: Vec<Vec<Tensor>>,
}

/// Background noise with a 1/f power spectrum, zero mean and the given
/// variance.
pub fn pink_noise<R: Rng + ?Sized>(n: usize, variance: f64, rng: &mut R) -> Vec<f64> {
    if n < 2 || variance == 0.0 {
        return vec![0.0; n];
    }
    let (fwd, inv) = fft_pair(n);
    let mut buf: Vec<Complex<f64>> = (0..n).map(|_| Complex::new(rng.sample(StandardNormal), 0.0)).collect();
    fwd.process(&mut buf);
    buf[0] = Complex::new(0.0, 0.0);
    for (k, b) in buf.iter_mut().enumerate().skip(1) {
        let f = k.min(n - k) as f64;
        *b /= f.sqrt();
    }
    inv.process(&mut buf);
    let mut out: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let mean = out.iter().sum::<f64>() / n as f64;
    let ms = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let scale = (variance / ms).sqrt();
    out.iter_mut().for_each(|v| *v = (*v - mean) * scale);
    out
}

/// Responses of every participant to the shared per-trial predictors.
pub fn gen_synthetic_eeg<R: Rng + ?Sized>(
    spec: &SyntheticEegSpec,
    predictors: &[TrialPredictors],
    rng: &mut R,
) -> Result<EegData> {
    spec.validate()?;
    if predictors.len() != spec.n_trials {
        return invalid(format!("{} predictor trials for {} trials", predictors.len(), spec.n_trials));
    }
    for (i, p) in predictors.iter().enumerate() {
        if p.ic.len() != p.envelope.len() {
            return shape_err(format!("trial {i}: IC and envelope lengths differ"));
        }
        if p.ic.iter().chain(&p.envelope).any(|v| !v.is_finite()) {
            return invalid(format!("trial {i}: predictors must be finite"));
        }
    }
    let nc = spec.n_channels;
    // Noise-free parts are shared by all participants up to a gain.
    let clean: Vec<Vec<Vec<f64>>> = predictors
        .iter()
        .map(|p| {
            (0..nc)
                .map(|c| {
                    let mut y = vec![0.0; p.ic.len()];
                    spec.kernels[c].envelope.apply(&p.envelope, &mut y);
                    if spec.coupled.contains(&c) {
                        spec.kernels[c].ic.apply(&p.ic, &mut y);
                    }
                    y
                })
                .collect()
        })
        .collect();
    let mut responses = Vec::with_capacity(spec.n_participants);
    for _ in 0..spec.n_participants {
        let gains: Vec<f64> = (0..nc)
            .map(|_| (spec.participant_gain_sd * rng.sample::<f64, _>(StandardNormal)).exp())
            .collect();
        let mut trials = Vec::with_capacity(spec.n_trials);
        for trial in &clean {
            let t_len = trial[0].len();
            let mut data = vec![0.0; t_len * nc];
            for c in 0..nc {
                let noise = pink_noise(t_len, spec.noise_power, rng);
                for t in 0..t_len {
                    data[t * nc + c] = gains[c] * trial[c][t] + noise[t];
                }
            }
            trials.push(Tensor::matrix(t_len, nc, data)?);
        }
        responses.push(trials);
    }
    Ok(EegData { responses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psd;
    use crate::numerics::rng::seeded;

    #[test]
    fn stimulus_layout() {
        let spec = StimulusSpec::default();
        let stim = gen_stimulus(&[0, 3, 7, 2, 5], &spec, &mut seeded(1)).unwrap();
        assert_eq!(stim.notes.len(), 5);
        assert_eq!(stim.waveform.len(), stim.n_frames * 8);
        for w in stim.notes.windows(2) {
            assert!(w[1].start >= w[0].start + w[0].len);
        }
        let (series, voiced) = stim.note_series(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        for (v, m) in series.iter().zip(&voiced) {
            assert_eq!(v.is_nan(), !m);
        }
        assert!(stim.note_series(&[1.0]).is_err());
        let again = gen_stimulus(&[0, 3, 7, 2, 5], &spec, &mut seeded(1)).unwrap();
        assert_eq!(stim, again);
    }

    #[test]
    fn kernel_convolution() {
        let k = Kernel {
            start_lag: -1,
            taps: vec![1.0, 2.0, 3.0],
        };
        let mut y = vec![0.0; 5];
        k.apply(&[0.0, 0.0, 1.0, 0.0, 0.0], &mut y);
        assert_eq!(y, vec![0.0, 1.0, 2.0, 3.0, 0.0]);
        assert_eq!(k.support_ms(100.0), Some((-10.0, 10.0)));
    }

    #[test]
    fn kernel_outside_window_is_rejected() {
        let mut spec = SyntheticEegSpec::standard(1.0);
        assert!(spec.validate().is_ok());
        spec.kernels[0].ic.start_lag = 20;
        assert!(spec.validate().is_err());
        let mut spec = SyntheticEegSpec::standard(1.0);
        spec.coupled.push(8);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn pink_noise_power_and_slope() {
        let n = 1 << 14;
        let x = pink_noise(n, 2.0, &mut seeded(4));
        let var = x.iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert!((var - 2.0).abs() < 1e-9);
        let p = psd(&x, 256).unwrap();
        // Power density falls by about an octave-doubling per octave.
        let band = |a: usize, b: usize| p[a..b].iter().sum::<f64>() / (b - a) as f64;
        let ratio = band(8, 16) / band(32, 64);
        assert!(ratio > 2.5 && ratio < 6.5, "{ratio}");
    }

    #[test]
    fn zero_kernels_give_pure_noise_and_noiseless_gives_convolution() {
        let pred = vec![TrialPredictors {
            ic: (0..200).map(|i| (i as f64 * 0.3).sin()).collect(),
            envelope: (0..200).map(|i| (i as f64 * 0.11).cos()).collect(),
        }];
        let mut spec = SyntheticEegSpec::standard(0.0);
        spec.n_trials = 1;
        spec.n_participants = 2;
        spec.participant_gain_sd = 0.0;
        let eeg = gen_synthetic_eeg(&spec, &pred, &mut seeded(2)).unwrap();
        let mut want = vec![0.0; 200];
        spec.kernels[0].envelope.apply(&pred[0].envelope, &mut want);
        spec.kernels[0].ic.apply(&pred[0].ic, &mut want);
        for t in 0..200 {
            assert!((eeg.responses[1][0].get2(t, 0) - want[t]).abs() < 1e-12);
        }

        for k in &mut spec.kernels {
            *k = ChannelKernels {
                ic: Kernel::zero(),
                envelope: Kernel::zero(),
            };
        }
        spec.noise_power = 1.0;
        let eeg = gen_synthetic_eeg(&spec, &pred, &mut seeded(2)).unwrap();
        let col: Vec<f64> = (0..200).map(|t| eeg.responses[0][0].get2(t, 3)).collect();
        let var = col.iter().map(|v| v * v).sum::<f64>() / 200.0;
        assert!((var - 1.0).abs() < 1e-9);
        assert!(gen_synthetic_eeg(&spec, &[], &mut seeded(2)).is_err());
    }
}
