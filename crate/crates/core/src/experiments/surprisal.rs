use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::{construction_name, Aggregation, Checkpoint, ExperimentConfig};
use crate::error::{invalid, Error, Result};
use crate::flow::{FlowConfig, FlowModel, FlowTrainer, SurprisalSeries, SurprisalTable};
use crate::noise::NoiseSchedule;
use crate::numerics::rng::{seeded, Purpose, RngStreams};
use crate::numerics::OptimizerState;
use crate::stats::{fdr_bh, spearman};
use crate::synthdata::{gen_melody_latents, oracle_ic, Construction, MarkovChain, MelodyBatch, MelodySpec};

/// Melodies of one seed under one latent construction. The chain and the
/// pitch sequences do not depend on the construction.
pub struct MelodyData {
    pub chain: MarkovChain,
    pub spec: MelodySpec,
    pub train: MelodyBatch,
    pub eval: MelodyBatch,
    /// Oracle IC of every evaluation note, sequence-major.
    pub oracle: Vec<f64>,
}

pub fn melody_data(config: &ExperimentConfig, construction: Construction) -> Result<MelodyData> {
    let c = &config.surprisal;
    let s = RngStreams::new(config.seed);
    let chain = MarkovChain::sample_dirichlet(c.n_pitches, c.dirichlet_alpha, c.uniform_mix, &mut s.substream(Purpose::Data, 9))?;
    let spec = MelodySpec {
        seq_len: c.seq_len,
        frames_per_note: c.frames_per_note,
        latent_dim: c.latent_dim,
        pitch_dim: c.pitch_dim,
        pitch_power: c.pitch_power,
        nuisance_power: c.nuisance_power,
        ..MelodySpec::standard(chain.clone(), construction, 100 + config.seed)
    };
    let train = gen_melody_latents(&spec, c.n_train, &mut s.substream(Purpose::Data, 0))?;
    let eval = gen_melody_latents(&spec, c.n_eval, &mut s.substream(Purpose::Data, 1))?;
    let mut oracle = Vec::with_capacity(c.n_eval * c.seq_len);
    for p in &eval.pitches {
        oracle.extend(oracle_ic(&chain, p)?);
    }
    Ok(MelodyData {
        chain,
        spec,
        train,
        eval,
        oracle,
    })
}

fn flow_config(config: &ExperimentConfig) -> Result<FlowConfig> {
    let c = &config.surprisal;
    Ok(FlowConfig {
        dim: c.latent_dim,
        context_dim: c.context_dim,
        hidden: c.hidden,
        time_freqs: c.time_freqs,
        schedule: NoiseSchedule::new(c.schedule_m, c.schedule_s, 1.0)?,
    })
}

/// Trains the flow on the melody latents (or leaves it at initialization
/// when `surprisal.trained` is false). Returns the model with parameters
/// rounded to `f32`, and the training losses.
pub fn train_flow(config: &ExperimentConfig, data: &MelodyData) -> Result<(FlowModel, Vec<f64>)> {
    let c = &config.surprisal;
    let s = RngStreams::new(config.seed);
    let mut model = FlowModel::new(flow_config(config)?, &mut s.stream(Purpose::Init))?;
    let mut losses = Vec::new();
    if c.trained {
        let trainer = FlowTrainer::new(c.lr, c.warmup, c.steps);
        let mut state = OptimizerState::new(&model.store);
        losses = trainer.fit(&mut model, &mut state, &data.train.latents, c.batch, c.steps, &mut s.stream(Purpose::Noise))?;
    }
    model.store.round_f32();
    Ok((model, losses))
}

/// Frame IC of every evaluation sequence at every grid level. Each level
/// draws from an evaluation stream keyed by the level in thousandths, so
/// editing the grid leaves the other levels unchanged.
pub fn surprisal_ic(config: &ExperimentConfig, model: &FlowModel, data: &MelodyData) -> Result<Vec<SurprisalSeries>> {
    let c = &config.surprisal;
    let s = RngStreams::new(config.seed);
    let run_id = construction_name(data.spec.construction);
    let inf = model.inference()?;
    let mut out = Vec::with_capacity(c.t_grid.len() * data.eval.latents.len());
    for &t in &c.t_grid {
        let key = (t * 1000.0).round() as u32;
        let ic = inf.sequences_ic(&data.eval.latents, t, c.n_draws, c.ode_steps, &mut s.substream(Purpose::Eval, key))?;
        for (seq, v) in ic.into_iter().enumerate() {
            out.push(SurprisalSeries::new(run_id, seq, t, c.n_draws, c.latent_dim, v)?);
        }
    }
    Ok(out)
}

/// Collapses each note's frames to one value.
pub fn note_ic(frames: &[f64], frames_per_note: usize, aggregation: Aggregation) -> Result<Vec<f64>> {
    if frames_per_note == 0 || frames.len() % frames_per_note != 0 {
        return invalid(format!("{} frames do not split into notes of {frames_per_note}", frames.len()));
    }
    Ok(frames.chunks(frames_per_note).map(|c| aggregation.apply(c)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationRow {
    pub construction: String,
    pub t: f64,
    pub rho: f64,
    pub p_value: f64,
    /// BH rejection across the construction's t grid.
    pub significant: bool,
}

/// Spearman ρ between note-level model IC and oracle IC per
/// (construction, t). Series must come in the order [`surprisal_ic`]
/// emits them; `oracle` is keyed by construction name.
pub fn correlate(
    config: &ExperimentConfig,
    series: &[SurprisalSeries],
    oracle: &BTreeMap<String, Vec<f64>>,
) -> Result<Vec<CorrelationRow>> {
    let c = &config.surprisal;
    let mut grouped: BTreeMap<(String, u64), Vec<&SurprisalSeries>> = BTreeMap::new();
    let mut order = Vec::new();
    for s in series {
        let key = (s.run_id.clone(), s.t_level.to_bits());
        if !grouped.contains_key(&key) {
            order.push(key.clone());
        }
        grouped.entry(key).or_default().push(s);
    }
    let mut rows = Vec::with_capacity(order.len());
    for key in &order {
        let mut seqs = grouped[key].clone();
        seqs.sort_by_key(|s| s.seq_id);
        let mut model = Vec::new();
        for s in seqs {
            model.extend(note_ic(&s.ic, c.frames_per_note, c.aggregation)?);
        }
        let truth = oracle
            .get(&key.0)
            .ok_or_else(|| Error::InvalidArgument(format!("no oracle IC for {}", key.0)))?;
        if truth.len() != model.len() {
            return invalid(format!("{}: {} model notes, {} oracle notes", key.0, model.len(), truth.len()));
        }
        let corr = spearman(&model, truth)?;
        rows.push(CorrelationRow {
            construction: key.0.clone(),
            t: f64::from_bits(key.1),
            rho: corr.rho,
            p_value: corr.p_value,
            significant: false,
        });
    }
    let names: Vec<String> = rows.iter().map(|r| r.construction.clone()).collect();
    for name in names.iter().collect::<std::collections::BTreeSet<_>>() {
        let idx: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].construction == **name).collect();
        let p: Vec<f64> = idx.iter().map(|&i| rows[i].p_value).collect();
        for (i, rej) in idx.into_iter().zip(fdr_bh(&p, c.alpha)?) {
            rows[i].significant = rej;
        }
    }
    Ok(rows)
}

/// Regroups a surprisal file into series, ordered by construction, level
/// and sequence.
pub fn series_from_table(table: &SurprisalTable, dim: usize) -> Result<Vec<SurprisalSeries>> {
    let mut map: BTreeMap<(String, u64, usize), Vec<(usize, f64, usize)>> = BTreeMap::new();
    for r in &table.rows {
        map.entry((r.run_id.clone(), r.t_level.to_bits(), r.seq_id))
            .or_default()
            .push((r.frame, r.ic_nats, r.n_draws));
    }
    let mut out = Vec::with_capacity(map.len());
    for ((run, t, seq), mut frames) in map {
        frames.sort_by_key(|f| f.0);
        if frames.iter().enumerate().any(|(i, f)| f.0 != i) {
            return Err(Error::Format(format!("{run} sequence {seq}: frames are not 0..n")));
        }
        let n_draws = frames[0].2;
        out.push(SurprisalSeries::new(run, seq, f64::from_bits(t), n_draws, dim, frames.iter().map(|f| f.1).collect())?);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SurprisalOutcome {
    pub series: Vec<SurprisalSeries>,
    pub correlations: Vec<CorrelationRow>,
    /// Final-step training loss per construction.
    pub final_loss: Vec<(String, f64)>,
}

pub fn run_surprisal(config: &ExperimentConfig) -> Result<SurprisalOutcome> {
    let mut series = Vec::new();
    let mut oracle = BTreeMap::new();
    let mut final_loss = Vec::new();
    for &cons in &config.surprisal.constructions {
        let data = melody_data(config, cons)?;
        let (model, losses) = train_flow(config, &data)?;
        let name = construction_name(cons).to_string();
        final_loss.push((name.clone(), losses.last().copied().unwrap_or(f64::NAN)));
        series.extend(surprisal_ic(config, &model, &data)?);
        oracle.insert(name, data.oracle);
    }
    let correlations = correlate(config, &series, &oracle)?;
    Ok(SurprisalOutcome {
        series,
        correlations,
        final_loss,
    })
}

const CORRELATION_HEADER: [&str; 7] = ["config_hash", "seed", "construction", "t", "rho", "p", "significant"];

pub fn write_correlation_csv<W: Write>(out: W, config: &ExperimentConfig, rows: &[CorrelationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CORRELATION_HEADER)?;
    let hash = config.hash();
    for r in rows {
        w.write_record([
            hash.clone(),
            config.seed.to_string(),
            r.construction.clone(),
            r.t.to_string(),
            r.rho.to_string(),
            r.p_value.to_string(),
            u8::from(r.significant).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_correlation_csv<R: Read>(input: R) -> Result<Vec<CorrelationRow>> {
    let mut r = csv::Reader::from_reader(input);
    if r.headers()?.iter().ne(CORRELATION_HEADER) {
        return Err(Error::Format("not a correlation file".into()));
    }
    let bad = |what: &str| Error::Format(format!("bad {what} value"));
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize, what: &str| rec.get(i).and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| bad(what));
        rows.push(CorrelationRow {
            construction: rec.get(2).unwrap_or("").to_string(),
            t: num(3, "t")?,
            rho: num(4, "rho")?,
            p_value: num(5, "p")?,
            significant: match rec.get(6) {
                Some("1") => true,
                Some("0") => false,
                _ => return Err(bad("significant")),
            },
        });
    }
    Ok(rows)
}

pub fn flow_checkpoint(config: &ExperimentConfig, construction: Construction, model: &FlowModel) -> Checkpoint {
    let mut meta = BTreeMap::new();
    meta.insert("model".to_string(), "flow".to_string());
    meta.insert("construction".to_string(), construction_name(construction).to_string());
    meta.insert("config_hash".to_string(), config.hash());
    meta.insert("seed".to_string(), config.seed.to_string());
    Checkpoint::from_store(&model.store, meta)
}

pub fn load_flow(config: &ExperimentConfig, ckpt: &Checkpoint) -> Result<FlowModel> {
    if ckpt.get("model")? != "flow" {
        return Err(Error::Checkpoint("not a flow checkpoint".into()));
    }
    let mut model = FlowModel::new(flow_config(config)?, &mut seeded(0))?;
    ckpt.restore(&mut model.store)?;
    Ok(model)
}
