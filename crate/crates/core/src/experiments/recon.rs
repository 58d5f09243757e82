use std::collections::BTreeMap;
use std::io::Write;

use super::{Checkpoint, ExperimentConfig};
use crate::autoencoder::{
    reconstruction_sweep, AutoencoderConfig, AutoencoderModel, NtMode, PerceptualWeights, SweepRow, Trainer,
};
use crate::error::{Error, Result};
use crate::metrics::FeatureMap;
use crate::noise::NoiseSchedule;
use crate::numerics::rng::{seeded, Purpose, RngStreams};
use crate::numerics::{OptimizerState, Tensor};
use crate::synthdata::{gen_hierarchical, HierarchicalSpec};

pub struct ReconData {
    pub spec: HierarchicalSpec,
    pub map: FeatureMap,
    pub train: Tensor,
    pub eval: Tensor,
}

/// Training and evaluation signals of one seed. The basis is keyed by the
/// seed too, so every seed is a different dataset.
pub fn recon_data(config: &ExperimentConfig) -> Result<ReconData> {
    let r = &config.recon;
    let spec = HierarchicalSpec {
        groups: r.groups,
        group_dim: 1,
        input_dim: r.input_dim,
        weights: PerceptualWeights::power_law(r.groups, r.weight_exponent)?,
        coeff_std: vec![1.0; r.groups],
        basis_seed: 1000 + config.seed,
    };
    let map = spec.feature_map()?;
    let s = RngStreams::new(config.seed);
    let train = gen_hierarchical(&spec, &map, r.n_train, &mut s.substream(Purpose::Data, 0))?.x;
    let eval = gen_hierarchical(&spec, &map, r.n_eval, &mut s.substream(Purpose::Data, 1))?.x;
    Ok(ReconData { spec, map, train, eval })
}

fn ae_config(config: &ExperimentConfig) -> Result<AutoencoderConfig> {
    let r = &config.recon;
    Ok(AutoencoderConfig {
        input_dim: r.input_dim,
        latent_dim: r.latent_dim,
        hidden: r.hidden.clone(),
        bottleneck: r.bottleneck,
        schedule: NoiseSchedule::new(r.schedule_m, r.schedule_s, r.gamma)?,
    })
}

fn check_losses(losses: &[f64], what: &str) -> Result<()> {
    match losses.iter().position(|l| !l.is_finite()) {
        Some(i) => Err(Error::Diverged(format!("{what}: loss {} at step {i}", losses[i]))),
        None => Ok(()),
    }
}

/// Pretrains one NT=NONE base, then finetunes a copy per configured mode
/// on the same data and noise streams. Parameters end rounded to `f32`,
/// the checkpoint precision.
pub fn train_autoencoders(config: &ExperimentConfig, data: &ReconData) -> Result<Vec<AutoencoderModel>> {
    let r = &config.recon;
    let s = RngStreams::new(config.seed);
    let mut base = AutoencoderModel::new(ae_config(config)?, NtMode::None, &mut s.stream(Purpose::Init))?;
    let trainer = Trainer::new(data.spec.weights.clone(), data.map.clone(), r.lr, r.pretrain_steps)?;
    let mut state = OptimizerState::new(&base.store);
    let losses = trainer.fit(&mut base, &mut state, &data.train, r.batch, r.pretrain_steps, &mut s.substream(Purpose::Noise, 0))?;
    check_losses(&losses, "pretraining")?;
    let mut models = Vec::with_capacity(r.nt_modes.len());
    for &mode in &r.nt_modes {
        let mut m = base.clone();
        m.nt_mode = mode;
        let trainer = Trainer::new(data.spec.weights.clone(), data.map.clone(), r.lr, r.finetune_steps)?;
        let mut state = OptimizerState::new(&m.store);
        let losses = trainer.fit(&mut m, &mut state, &data.train, r.batch, r.finetune_steps, &mut s.substream(Purpose::Noise, 1))?;
        check_losses(&losses, mode.as_str())?;
        m.store.round_f32();
        models.push(m);
    }
    Ok(models)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeSweep {
    pub mode: NtMode,
    pub rows: Vec<SweepRow>,
}

/// Every model through the SNR levels with the same evaluation stream.
pub fn sweep_models(config: &ExperimentConfig, data: &ReconData, models: &[AutoencoderModel]) -> Result<Vec<ModeSweep>> {
    let s = RngStreams::new(config.seed);
    models
        .iter()
        .map(|m| {
            let rows = reconstruction_sweep(
                m,
                &data.eval,
                &config.recon.snr,
                config.recon.draws,
                &data.spec.weights,
                &data.map,
                &mut s.stream(Purpose::Eval),
            )?;
            Ok(ModeSweep { mode: m.nt_mode, rows })
        })
        .collect()
}

pub fn run_recon_sweep(config: &ExperimentConfig) -> Result<Vec<ModeSweep>> {
    let data = recon_data(config)?;
    let models = train_autoencoders(config, &data)?;
    sweep_models(config, &data, &models)
}

/// One row per (mode, SNR, group).
pub fn write_recon_csv<W: Write>(out: W, config: &ExperimentConfig, weights: &PerceptualWeights, sweeps: &[ModeSweep]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "config_hash",
        "seed",
        "nt_mode",
        "snr",
        "t",
        "group",
        "weight",
        "group_error",
        "weighted_error",
        "si_sdr_db",
    ])?;
    let hash = config.hash();
    for sweep in sweeps {
        for row in &sweep.rows {
            for (k, (e, wk)) in row.group_error.iter().zip(weights.as_slice()).enumerate() {
                w.write_record([
                    hash.clone(),
                    config.seed.to_string(),
                    sweep.mode.as_str().to_string(),
                    row.snr.to_string(),
                    row.t.to_string(),
                    k.to_string(),
                    wk.to_string(),
                    e.to_string(),
                    row.weighted_error.to_string(),
                    row.si_sdr_db.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn autoencoder_checkpoint(config: &ExperimentConfig, model: &AutoencoderModel) -> Checkpoint {
    let mut meta = BTreeMap::new();
    meta.insert("model".to_string(), "autoencoder".to_string());
    meta.insert("nt_mode".to_string(), model.nt_mode.as_str().to_string());
    meta.insert("config_hash".to_string(), config.hash());
    meta.insert("seed".to_string(), config.seed.to_string());
    Checkpoint::from_store(&model.store, meta)
}

/// Rebuilds the configured architecture and loads the stored parameters.
pub fn load_autoencoder(config: &ExperimentConfig, ckpt: &Checkpoint) -> Result<AutoencoderModel> {
    if ckpt.get("model")? != "autoencoder" {
        return Err(Error::Checkpoint("not an autoencoder checkpoint".into()));
    }
    let mode = match ckpt.get("nt_mode")? {
        "ED" => NtMode::Ed,
        "D" => NtMode::D,
        "NONE" => NtMode::None,
        other => return Err(Error::Checkpoint(format!("unknown NT mode {other}"))),
    };
    let mut m = AutoencoderModel::new(ae_config(config)?, mode, &mut seeded(0))?;
    ckpt.restore(&mut m.store)?;
    Ok(m)
}
