use std::collections::BTreeMap;
use std::io::Write;

use super::surprisal::MelodyData;
use super::{note_ic, ExperimentConfig};
use crate::error::{shape_err, Result};
use crate::flow::SurprisalSeries;
use crate::numerics::rng::{Purpose, RngStreams};
use crate::synthdata::{
    gen_stimulus, gen_synthetic_eeg, ChannelKernels, EegData, Kernel, Stimulus, StimulusSpec, SyntheticEegSpec,
    TrialPredictors,
};
use crate::trf::{block_mean, delta_r_pipeline, hilbert_envelope, interpolate_unvoiced, EncodingResult, LagWindow, TrfConfig};

/// Stimuli of the evaluation melodies with their envelope and oracle IC
/// predictors, one entry per trial.
pub struct EncodingStimuli {
    pub stimuli: Vec<Stimulus>,
    pub envelope: Vec<Vec<f64>>,
    pub oracle_ic: Vec<Vec<f64>>,
}

/// Fills rests in a per-note series with the stream shared by every
/// predictor, so all IC predictors see the same fill positions.
fn frame_predictor(config: &ExperimentConfig, stimuli: &[Stimulus], notes: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let mut rng = RngStreams::new(config.seed).substream(Purpose::Data, 11);
    stimuli
        .iter()
        .zip(notes)
        .map(|(stim, v)| {
            let (series, voiced) = stim.note_series(v)?;
            interpolate_unvoiced(&series, &voiced, &mut rng)
        })
        .collect()
}

pub fn encoding_stimuli(config: &ExperimentConfig, data: &MelodyData) -> Result<EncodingStimuli> {
    let e = &config.encoding;
    let spec = StimulusSpec {
        frame_rate: e.frame_rate,
        oversample: e.oversample,
        ..StimulusSpec::default()
    };
    let mut rng = RngStreams::new(config.seed).substream(Purpose::Data, 10);
    let stimuli = data
        .eval
        .pitches
        .iter()
        .map(|p| gen_stimulus(p, &spec, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut envelope = Vec::with_capacity(stimuli.len());
    for s in &stimuli {
        let env = block_mean(&hilbert_envelope(&s.waveform, s.audio_rate)?, e.oversample)?;
        envelope.push(env);
    }
    let notes: Vec<Vec<f64>> = data.oracle.chunks(data.spec.seq_len).map(<[f64]>::to_vec).collect();
    let oracle_ic = frame_predictor(config, &stimuli, &notes)?;
    Ok(EncodingStimuli {
        stimuli,
        envelope,
        oracle_ic,
    })
}

fn eeg_spec(config: &ExperimentConfig, n_trials: usize) -> SyntheticEegSpec {
    let e = &config.encoding;
    let kernels = (0..e.channels)
        .map(|c| {
            let a = 1.0 / (1.0 + 0.1 * c as f64);
            ChannelKernels {
                ic: Kernel::biphasic(e.frame_rate, 150.0, a),
                envelope: Kernel::biphasic(e.frame_rate, 120.0, a),
            }
        })
        .collect();
    SyntheticEegSpec {
        n_channels: e.channels,
        n_trials,
        n_participants: e.participants,
        sample_rate: e.frame_rate,
        kernels,
        coupled: e.coupled.clone(),
        noise_power: e.noise_power,
        participant_gain_sd: e.gain_sd,
        lag_window_ms: (e.lag_min_ms, e.lag_max_ms),
    }
}

fn trf_config(config: &ExperimentConfig) -> TrfConfig {
    let e = &config.encoding;
    TrfConfig {
        window: LagWindow {
            min_ms: e.lag_min_ms,
            max_ms: e.lag_max_ms,
            margin_ms: e.margin_ms,
            rate: e.frame_rate,
        },
        lambdas: e.lambdas.clone(),
        inner_folds: e.inner_folds,
    }
}

#[derive(Clone, Debug)]
pub struct EncodingCell {
    pub label: String,
    pub t: f64,
    pub result: EncodingResult,
}

#[derive(Clone, Debug)]
pub struct EncodingOutcome {
    /// The generating IC as predictor, then one cell per construction and
    /// level.
    pub cells: Vec<EncodingCell>,
    pub coupled: Vec<usize>,
}

fn check_rates(eeg: &EegData, predictors: &[Vec<f64>]) -> Result<()> {
    for (k, p) in predictors.iter().enumerate() {
        let rows = eeg.responses[0][k].rows();
        if rows != p.len() {
            return shape_err(format!("trial {k}: {} predictor samples for {rows} response samples", p.len()));
        }
    }
    Ok(())
}

/// Synthetic EEG driven by the oracle IC and the envelope, then Δr of every
/// model IC series in `series` against the envelope-only model.
pub fn run_encoding(config: &ExperimentConfig, data: &MelodyData, series: &[SurprisalSeries]) -> Result<EncodingOutcome> {
    let stim = encoding_stimuli(config, data)?;
    let n_trials = stim.stimuli.len();
    let predictors: Vec<TrialPredictors> = stim
        .oracle_ic
        .iter()
        .zip(&stim.envelope)
        .map(|(ic, env)| TrialPredictors {
            ic: ic.clone(),
            envelope: env.clone(),
        })
        .collect();
    let eeg = gen_synthetic_eeg(
        &eeg_spec(config, n_trials),
        &predictors,
        &mut RngStreams::new(config.seed).substream(Purpose::Data, 12),
    )?;
    let trf = trf_config(config);

    let mut cells = Vec::new();
    check_rates(&eeg, &stim.oracle_ic)?;
    cells.push(EncodingCell {
        label: "oracle".into(),
        t: 0.0,
        result: delta_r_pipeline(&eeg, &stim.oracle_ic, &stim.envelope, &trf)?,
    });

    let mut grouped: BTreeMap<(String, u64), Vec<&SurprisalSeries>> = BTreeMap::new();
    let mut order = Vec::new();
    for s in series {
        let key = (s.run_id.clone(), s.t_level.to_bits());
        if !grouped.contains_key(&key) {
            order.push(key.clone());
        }
        grouped.entry(key).or_default().push(s);
    }
    let s = &config.surprisal;
    for key in order {
        let mut seqs = grouped[&key].clone();
        seqs.sort_by_key(|x| x.seq_id);
        if seqs.len() != n_trials {
            return shape_err(format!("{} has {} sequences for {n_trials} trials", key.0, seqs.len()));
        }
        let notes = seqs
            .iter()
            .map(|x| note_ic(&x.ic, s.frames_per_note, s.aggregation))
            .collect::<Result<Vec<_>>>()?;
        let ic = frame_predictor(config, &stim.stimuli, &notes)?;
        check_rates(&eeg, &ic)?;
        cells.push(EncodingCell {
            label: key.0,
            t: f64::from_bits(key.1),
            result: delta_r_pipeline(&eeg, &ic, &stim.envelope, &trf)?,
        });
    }
    Ok(EncodingOutcome {
        cells,
        coupled: config.encoding.coupled.clone(),
    })
}

/// One row per cell: mean Δr and significant-channel counts for coupled
/// and uncoupled channels.
pub fn write_encoding_summary_csv<W: Write>(out: W, config: &ExperimentConfig, outcome: &EncodingOutcome) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "config_hash",
        "seed",
        "label",
        "t",
        "mean_delta_r_coupled",
        "mean_delta_r_uncoupled",
        "significant_coupled",
        "significant_uncoupled",
    ])?;
    let hash = config.hash();
    for cell in &outcome.cells {
        let (mut dc, mut du, mut nc, mut nu, mut sc, mut su) = (0.0, 0.0, 0usize, 0usize, 0usize, 0usize);
        for ch in &cell.result.channels {
            if outcome.coupled.contains(&ch.channel) {
                dc += ch.mean_delta_r;
                nc += 1;
                sc += usize::from(ch.significant);
            } else {
                du += ch.mean_delta_r;
                nu += 1;
                su += usize::from(ch.significant);
            }
        }
        let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
        w.write_record([
            hash.clone(),
            config.seed.to_string(),
            cell.label.clone(),
            cell.t.to_string(),
            mean(dc, nc).to_string(),
            mean(du, nu).to_string(),
            sc.to_string(),
            su.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
