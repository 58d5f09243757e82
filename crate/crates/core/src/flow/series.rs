use std::io::{Read, Write};

use crate::error::{invalid, Error, Result};

pub const SURPRISAL_HEADER: [&str; 9] = [
    "config_hash",
    "seed",
    "run_id",
    "seq_id",
    "frame",
    "t_level",
    "n_draws",
    "ic_nats",
    "ic_nats_per_dim",
];

/// Per-frame information content of one sequence at one noise level.
#[derive(Clone, Debug, PartialEq)]
pub struct SurprisalSeries {
    pub run_id: String,
    pub seq_id: usize,
    pub t_level: f64,
    pub n_draws: usize,
    /// Latent frame dimension, for the per-dim column.
    pub dim: usize,
    /// Nats, one entry per frame.
    pub ic: Vec<f64>,
}

impl SurprisalSeries {
    pub fn new(run_id: impl Into<String>, seq_id: usize, t_level: f64, n_draws: usize, dim: usize, ic: Vec<f64>) -> Result<Self> {
        let s = Self {
            run_id: run_id.into(),
            seq_id,
            t_level,
            n_draws,
            dim,
            ic,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.t_level) {
            return invalid(format!("t_level = {} outside [0, 1)", self.t_level));
        }
        if self.n_draws == 0 || self.dim == 0 {
            return invalid("n_draws and dim must be positive");
        }
        if self.ic.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("IC of sequence {}", self.seq_id)));
        }
        Ok(())
    }

    pub fn rows(&self) -> impl Iterator<Item = SurprisalRow> + '_ {
        self.ic.iter().enumerate().map(|(frame, &ic)| SurprisalRow {
            run_id: self.run_id.clone(),
            seq_id: self.seq_id,
            frame,
            t_level: self.t_level,
            n_draws: self.n_draws,
            ic_nats: ic,
            ic_nats_per_dim: ic / self.dim as f64,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurprisalRow {
    pub run_id: String,
    pub seq_id: usize,
    pub frame: usize,
    pub t_level: f64,
    pub n_draws: usize,
    pub ic_nats: f64,
    pub ic_nats_per_dim: f64,
}

/// Writes every series, tagging rows with the config hash and seed.
pub fn write_surprisal_csv<W: Write>(out: W, config_hash: &str, seed: u64, series: &[SurprisalSeries]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SURPRISAL_HEADER)?;
    for s in series {
        s.validate()?;
        for r in s.rows() {
            w.write_record([
                config_hash.to_string(),
                seed.to_string(),
                r.run_id,
                r.seq_id.to_string(),
                r.frame.to_string(),
                r.t_level.to_string(),
                r.n_draws.to_string(),
                r.ic_nats.to_string(),
                r.ic_nats_per_dim.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// A parsed surprisal file.
#[derive(Clone, Debug, PartialEq)]
pub struct SurprisalTable {
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<SurprisalRow>,
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, line: u64) -> Result<T> {
    let raw = rec.get(i).unwrap_or("");
    raw.parse()
        .map_err(|_| Error::Format(format!("line {line}: bad {} value {raw:?}", SURPRISAL_HEADER[i])))
}

/// Reads a file written by [`write_surprisal_csv`].
///
/// All rows must share one config hash and seed, and IC values must be finite.
pub fn read_surprisal_csv<R: Read>(input: R) -> Result<SurprisalTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rdr.headers()?.clone();
    if header.iter().ne(SURPRISAL_HEADER.iter().copied()) {
        return Err(Error::Format(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut table: Option<SurprisalTable> = None;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != SURPRISAL_HEADER.len() {
            return Err(Error::Format(format!("line {line}: {} fields", rec.len())));
        }
        let hash = rec[0].to_string();
        let seed: u64 = field(&rec, 1, line)?;
        let row = SurprisalRow {
            run_id: rec[2].to_string(),
            seq_id: field(&rec, 3, line)?,
            frame: field(&rec, 4, line)?,
            t_level: field(&rec, 5, line)?,
            n_draws: field(&rec, 6, line)?,
            ic_nats: field(&rec, 7, line)?,
            ic_nats_per_dim: field(&rec, 8, line)?,
        };
        if !(0.0..1.0).contains(&row.t_level) || row.n_draws == 0 {
            return Err(Error::Format(format!("line {line}: t_level or n_draws out of range")));
        }
        if !row.ic_nats.is_finite() || !row.ic_nats_per_dim.is_finite() {
            return Err(Error::Format(format!("line {line}: non-finite IC")));
        }
        match &mut table {
            None => {
                table = Some(SurprisalTable {
                    config_hash: hash,
                    seed,
                    rows: vec![row],
                })
            }
            Some(t) => {
                if t.config_hash != hash || t.seed != seed {
                    return Err(Error::Format(format!("line {line}: mixed config hash or seed")));
                }
                t.rows.push(row);
            }
        }
    }
    table.ok_or_else(|| Error::Format("no rows".into()))
}
