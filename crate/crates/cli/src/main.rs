use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pald_core::experiments::{
    autoencoder_checkpoint, construction_name, correlate, encoding_stimuli, flow_checkpoint, load_autoencoder,
    load_checkpoint, load_flow, melody_data, recon_data, report, run_encoding, series_from_table, surprisal_ic,
    sweep_models, train_autoencoders, train_flow, write_correlation_csv, write_encoding_summary_csv, write_recon_csv,
    Checkpoint, ExperimentConfig, Manifest,
};
use pald_core::flow::{read_surprisal_csv, write_surprisal_csv};
use pald_core::numerics::Tensor;
use pald_core::synthdata::Construction;
use pald_core::trf::{write_encoding_csv, write_topography_csv};
use pald_core::{Error, Result};

#[derive(Parser)]
#[command(name = "pald", version, about = "Noised-latent autoencoder, flow surprisal and TRF experiments")]
struct Cli {
    /// Config file (`section.key = value` lines); defaults apply without it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `experiment.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic datasets of the configured experiment.
    GenData,
    /// Train the autoencoders, one checkpoint per NT mode.
    TrainAe,
    /// Reconstruction sweep over SNR levels from autoencoder checkpoints.
    Sweep,
    /// Train the autoregressive flow, one checkpoint per construction.
    TrainFlow,
    /// Frame IC and oracle correlations from flow checkpoints.
    Ic,
    /// TRF encoding analysis of the IC written by `ic`.
    Encode,
    /// Summarize the result files in the output directory.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainAe => "train-ae",
            Command::Sweep => "sweep",
            Command::TrainFlow => "train-flow",
            Command::Ic => "ic",
            Command::Encode => "encode",
            Command::Report => "report",
        }
    }
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn stack(seqs: &[Tensor]) -> Result<Tensor> {
    let cols = seqs.first().map_or(0, Tensor::cols);
    let data: Vec<f64> = seqs.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::matrix(data.len() / cols.max(1), cols, data)
}

fn checked_load(config: &ExperimentConfig, path: &Path) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    let stored = ck.get("config_hash")?;
    if stored != config.hash() {
        return Err(Error::Config(format!(
            "{} was written under config {stored}, current config is {}",
            path.display(),
            config.hash()
        )));
    }
    Ok(ck)
}

fn gen_data(config: &ExperimentConfig, out: &Path, m: &mut Manifest) -> Result<()> {
    let meta = |what: &str| {
        BTreeMap::from([
            ("data".to_string(), what.to_string()),
            ("config_hash".to_string(), config.hash()),
            ("seed".to_string(), config.seed.to_string()),
        ])
    };
    let data = recon_data(config)?;
    let ck = Checkpoint::new(
        meta("hierarchical"),
        vec![("eval".into(), data.eval), ("train".into(), data.train), ("basis".into(), data.map.basis().clone())],
    );
    m.emit(out, "recon-data.pald", &ck.encode()?)?;

    let mut notes = csv::Writer::from_writer(Vec::new());
    notes.write_record(["config_hash", "seed", "seq_id", "note", "pitch", "oracle_ic"])?;
    for &cons in &config.surprisal.constructions {
        let mel = melody_data(config, cons)?;
        let ck = Checkpoint::new(
            meta(construction_name(cons)),
            vec![("eval".into(), stack(&mel.eval.latents)?), ("train".into(), stack(&mel.train.latents)?)],
        );
        m.emit(out, &format!("melody-{}.pald", construction_name(cons)), &ck.encode()?)?;
        if cons == config.surprisal.constructions[0] {
            let mut ic = mel.oracle.iter();
            for (s, pitches) in mel.eval.pitches.iter().enumerate() {
                for (k, p) in pitches.iter().enumerate() {
                    let v = ic.next().copied().unwrap_or(f64::NAN);
                    notes.write_record([config.hash(), config.seed.to_string(), s.to_string(), k.to_string(), p.to_string(), v.to_string()])?;
                }
            }
            let stim = encoding_stimuli(config, &mel)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["config_hash", "seed", "trial", "sample", "envelope", "oracle_ic"])?;
            for (k, (env, ic)) in stim.envelope.iter().zip(&stim.oracle_ic).enumerate() {
                for (i, (e, v)) in env.iter().zip(ic).enumerate() {
                    w.write_record([config.hash(), config.seed.to_string(), k.to_string(), i.to_string(), e.to_string(), v.to_string()])?;
                }
            }
            m.emit(out, "predictors.csv", &w.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;
        }
    }
    m.emit(out, "melodies.csv", &notes.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let out = &cli.out;
    fs::create_dir_all(out)?;
    let mut m = Manifest::new(cli.command.name(), &config);
    match cli.command {
        Command::GenData => gen_data(&config, out, &mut m)?,
        Command::TrainAe => {
            let data = recon_data(&config)?;
            for model in train_autoencoders(&config, &data)? {
                let ck = autoencoder_checkpoint(&config, &model);
                m.emit(out, &format!("ae-{}.pald", model.nt_mode.as_str()), &ck.encode()?)?;
            }
        }
        Command::Sweep => {
            let data = recon_data(&config)?;
            let models = config
                .recon
                .nt_modes
                .iter()
                .map(|mode| load_autoencoder(&config, &checked_load(&config, &out.join(format!("ae-{}.pald", mode.as_str())))?))
                .collect::<Result<Vec<_>>>()?;
            let sweeps = sweep_models(&config, &data, &models)?;
            m.emit(out, "recon.csv", &csv_bytes(|b| write_recon_csv(b, &config, &data.spec.weights, &sweeps))?)?;
        }
        Command::TrainFlow => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["config_hash", "seed", "construction", "step", "loss"])?;
            for &cons in &config.surprisal.constructions {
                let data = melody_data(&config, cons)?;
                let (model, losses) = train_flow(&config, &data)?;
                for (i, l) in losses.iter().enumerate() {
                    w.write_record([config.hash(), config.seed.to_string(), construction_name(cons).into(), i.to_string(), l.to_string()])?;
                }
                let ck = flow_checkpoint(&config, cons, &model);
                m.emit(out, &format!("flow-{}.pald", construction_name(cons)), &ck.encode()?)?;
            }
            m.emit(out, "flow_loss.csv", &w.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;
        }
        Command::Ic => {
            let mut series = Vec::new();
            let mut oracle = BTreeMap::new();
            for &cons in &config.surprisal.constructions {
                let name = construction_name(cons);
                let data = melody_data(&config, cons)?;
                let model = load_flow(&config, &checked_load(&config, &out.join(format!("flow-{name}.pald")))?)?;
                series.extend(surprisal_ic(&config, &model, &data)?);
                oracle.insert(name.to_string(), data.oracle);
            }
            let rows = correlate(&config, &series, &oracle)?;
            m.emit(out, "surprisal.csv", &csv_bytes(|b| write_surprisal_csv(b, &config.hash(), config.seed, &series))?)?;
            m.emit(out, "correlation.csv", &csv_bytes(|b| write_correlation_csv(b, &config, &rows))?)?;
        }
        Command::Encode => {
            let table = read_surprisal_csv(fs::File::open(out.join("surprisal.csv"))?)?;
            if table.config_hash != config.hash() {
                return Err(Error::Config(format!(
                    "surprisal.csv was written under config {}, current config is {}",
                    table.config_hash,
                    config.hash()
                )));
            }
            let series = series_from_table(&table, config.surprisal.latent_dim)?;
            let data = melody_data(&config, Construction::Aligned)?;
            let outcome = run_encoding(&config, &data, &series)?;
            m.emit(out, "encoding_summary.csv", &csv_bytes(|b| write_encoding_summary_csv(b, &config, &outcome))?)?;
            let (mut detail, mut topo) = (Vec::new(), Vec::new());
            for (i, cell) in outcome.cells.iter().enumerate() {
                let label = format!("{}@{}", cell.label, cell.t);
                let d = csv_bytes(|b| write_encoding_csv(b, &config.hash(), config.seed, &label, &cell.result))?;
                let t = csv_bytes(|b| write_topography_csv(b, &config.hash(), config.seed, &label, &cell.result))?;
                // Keep one header per file.
                let skip = |b: &[u8]| if i == 0 { 0 } else { b.iter().position(|&c| c == b'\n').map_or(b.len(), |p| p + 1) };
                detail.extend_from_slice(&d[skip(&d)..]);
                topo.extend_from_slice(&t[skip(&t)..]);
            }
            m.emit(out, "encoding.csv", &detail)?;
            m.emit(out, "topography.csv", &topo)?;
        }
        Command::Report => {
            let text = report(out)?;
            print!("{text}");
            m.emit(out, "report.txt", text.as_bytes())?;
        }
    }
    m.write(out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pald {}: {e}", cli.command.name());
            ExitCode::from(match e {
                Error::Config(_) => 2,
                e if e.is_numerical() => 3,
                _ => 1,
            })
        }
    }
}
