use std::fmt::Write as _;
use std::fs::File;
use std::path::Path;

use super::{read_correlation_csv, CorrelationRow};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PeakSummary {
    pub construction: String,
    pub peak_t: f64,
    pub peak_rho: f64,
    /// The peak is neither the first nor the last grid level.
    pub interior: bool,
}

/// Peak of each construction's ρ-versus-t curve, in order of appearance.
pub fn summarize_correlations(rows: &[CorrelationRow]) -> Vec<PeakSummary> {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.construction.as_str()) {
            names.push(&r.construction);
        }
    }
    names
        .into_iter()
        .filter_map(|name| {
            let mut curve: Vec<&CorrelationRow> = rows.iter().filter(|r| r.construction == name).collect();
            curve.sort_by(|a, b| a.t.total_cmp(&b.t));
            let (i, best) = curve.iter().enumerate().max_by(|a, b| a.1.rho.total_cmp(&b.1.rho))?;
            Some(PeakSummary {
                construction: name.to_string(),
                peak_t: best.t,
                peak_rho: best.rho,
                interior: i > 0 && i + 1 < curve.len(),
            })
        })
        .collect()
}

fn records(path: &Path) -> Result<Option<(csv::StringRecord, Vec<csv::StringRecord>)>> {
    if !path.exists() {
        return Ok(None);
    }
    let mut r = csv::Reader::from_reader(File::open(path)?);
    let header = r.headers()?.clone();
    let rows = r.records().collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Some((header, rows)))
}

fn column(header: &csv::StringRecord, name: &str, file: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Format(format!("{file} lacks a {name} column")))
}

/// Plain-text summary of whichever result files exist in `dir`.
pub fn report(dir: &Path) -> Result<String> {
    let mut out = String::new();
    if let Some((h, rows)) = records(&dir.join("recon.csv"))? {
        let (mode, snr, group, werr, sdr) = (
            column(&h, "nt_mode", "recon.csv")?,
            column(&h, "snr", "recon.csv")?,
            column(&h, "group", "recon.csv")?,
            column(&h, "weighted_error", "recon.csv")?,
            column(&h, "si_sdr_db", "recon.csv")?,
        );
        out += "reconstruction (weighted error, SI-SDR dB)\n";
        for r in rows.iter().filter(|r| r.get(group) == Some("0")) {
            let _ = writeln!(
                out,
                "  {:<5} snr {:>5}  {:>10}  {:>8}",
                &r[mode],
                &r[snr],
                &r[werr][..r[werr].len().min(10)],
                &r[sdr][..r[sdr].len().min(8)]
            );
        }
    }
    let corr = dir.join("correlation.csv");
    if corr.exists() {
        let rows = read_correlation_csv(File::open(&corr)?)?;
        out += "surprisal (Spearman ρ vs oracle IC)\n";
        for r in &rows {
            let _ = writeln!(
                out,
                "  {:<9} t {:.2}  ρ {:+.3}  p {:.2e}{}",
                r.construction,
                r.t,
                r.rho,
                r.p_value,
                if r.significant { "  *" } else { "" }
            );
        }
        for p in summarize_correlations(&rows) {
            let _ = writeln!(
                out,
                "  peak {:<9} t {:.2}  ρ {:+.3}  {}",
                p.construction,
                p.peak_t,
                p.peak_rho,
                if p.interior { "interior" } else { "edge" }
            );
        }
    }
    if let Some((h, rows)) = records(&dir.join("encoding_summary.csv"))? {
        let f = "encoding_summary.csv";
        let (label, t, dc, du, sc, su) = (
            column(&h, "label", f)?,
            column(&h, "t", f)?,
            column(&h, "mean_delta_r_coupled", f)?,
            column(&h, "mean_delta_r_uncoupled", f)?,
            column(&h, "significant_coupled", f)?,
            column(&h, "significant_uncoupled", f)?,
        );
        out += "encoding (mean Δr coupled / uncoupled, significant channels)\n";
        for r in &rows {
            let num = |i: usize| r[i].parse::<f64>().unwrap_or(f64::NAN);
            let _ = writeln!(
                out,
                "  {:<9} t {:.2}  Δr {:+.4} / {:+.4}  sig {} / {}",
                &r[label],
                num(t),
                num(dc),
                num(du),
                &r[sc],
                &r[su]
            );
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(format!("no result files in {}", dir.display())));
    }
    Ok(out)
}
