//! Correlation and hypothesis tests used by the surprisal and neural
//! encoding analyses.
//!
//! Conventions fixed here: zero differences are dropped before the
//! Wilcoxon signed-rank test, Bonferroni rejects on `p ≤ α/m`
//! (inclusive), and Anderson–Darling uses the case-3 (mean and variance
//! estimated) statistic with Stephens' small-sample correction.

mod dist;

pub use dist::{
    erf, erfc, gamma_p, gamma_q, inc_beta, ln_gamma, normal_cdf, normal_sf, student_t_cdf,
    student_t_two_sided,
};

use crate::error::{invalid, Error, Result};

/// Significance level used throughout.
pub const ALPHA: f64 = 0.05;

/// Largest sample for which Wilcoxon p-values are enumerated exactly.
pub const WILCOXON_EXACT_MAX: usize = 12;

/// 5% critical value of the corrected case-3 Anderson–Darling statistic.
pub const AD_CRITICAL_5: f64 = 0.752;

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn check_paired(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return invalid(format!("paired samples of length {} and {}", x.len(), y.len()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("statistical sample".into()));
    }
    Ok(())
}

/// Pearson product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_paired(x, y)?;
    if x.len() < 3 {
        return invalid("pearson needs at least 3 pairs");
    }
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("zero variance in correlation".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn rank(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correlation {
    pub rho: f64,
    pub p_value: f64,
    pub significant: bool,
}

/// Spearman rank correlation with a t-approximation p-value on n − 2
/// degrees of freedom.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Correlation> {
    check_paired(x, y)?;
    if x.len() < 3 {
        return invalid("spearman needs at least 3 pairs");
    }
    let rho = pearson(&rank(x), &rank(y)).map_err(|e| match e {
        Error::Degenerate(_) => Error::Degenerate("all-tied sample in spearman".into()),
        other => other,
    })?;
    let dof = (x.len() - 2) as f64;
    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else {
        student_t_two_sided(rho * (dof / (1.0 - rho * rho)).sqrt(), dof)
    };
    Ok(Correlation {
        rho,
        p_value,
        significant: p_value < ALPHA,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub dof: f64,
    pub p_value: f64,
}

/// Paired two-sided t-test on `x − y`.
pub fn paired_t(x: &[f64], y: &[f64]) -> Result<TTest> {
    check_paired(x, y)?;
    let n = x.len();
    if n < 2 {
        return invalid("paired t-test needs at least 2 pairs");
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let md = mean(&d);
    let var = d.iter().map(|v| (v - md).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Err(Error::Degenerate("zero-variance paired differences".into()));
    }
    let t = md / (var / n as f64).sqrt();
    let dof = (n - 1) as f64;
    Ok(TTest {
        t,
        dof,
        p_value: student_t_two_sided(t, dof),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Wilcoxon {
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    /// Sum of ranks of negative differences.
    pub w_minus: f64,
    /// Differences left after dropping zeros.
    pub n_used: usize,
    pub p_value: f64,
    pub exact: bool,
}

/// Two-sided Wilcoxon signed-rank test on `x − y`.
///
/// Exact by enumerating all sign assignments for up to
/// [`WILCOXON_EXACT_MAX`] nonzero differences; normal approximation with
/// tie and continuity corrections above.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<Wilcoxon> {
    check_paired(x, y)?;
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|v| *v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Err(Error::Degenerate("all paired differences are zero".into()));
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = rank(&abs);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let (p_value, exact) = if n <= WILCOXON_EXACT_MAX {
        // Ranks are multiples of 1/2; double them to count exactly.
        let doubled: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
        let obs = (2.0 * w_plus).round() as u64;
        let (mut le, mut ge) = (0u64, 0u64);
        for mask in 0u32..(1u32 << n) {
            let s: u64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| doubled[i]).sum();
            if s <= obs {
                le += 1;
            }
            if s >= obs {
                ge += 1;
            }
        }
        let total = (1u64 << n) as f64;
        ((2.0 * le.min(ge) as f64 / total).min(1.0), true)
    } else {
        let nf = n as f64;
        let mu = nf * (nf + 1.0) / 4.0;
        let mut tie = 0.0;
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie += t * t * t - t;
            i = j + 1;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie / 48.0;
        let z = ((w_plus - mu).abs() - 0.5).max(0.0) / var.sqrt();
        ((2.0 * normal_sf(z)).min(1.0), false)
    };
    Ok(Wilcoxon {
        w_plus,
        w_minus,
        n_used: n,
        p_value,
        exact,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AndersonDarling {
    pub a2: f64,
    /// `A²·(1 + 0.75/n + 2.25/n²)`.
    pub a2_star: f64,
    pub reject: bool,
}

/// Anderson–Darling normality test with estimated mean and variance.
pub fn anderson_darling_normality(x: &[f64]) -> Result<AndersonDarling> {
    let n = x.len();
    if n < 8 {
        return invalid("anderson-darling needs at least 8 samples");
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("anderson-darling sample".into()));
    }
    let m = mean(x);
    let sd = (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    if sd == 0.0 {
        return Err(Error::Degenerate("constant sample".into()));
    }
    let mut y: Vec<f64> = x.iter().map(|v| (v - m) / sd).collect();
    y.sort_by(f64::total_cmp);
    let nf = n as f64;
    let s: f64 = (0..n)
        .map(|i| {
            let lo = normal_cdf(y[i]).ln();
            let hi = normal_sf(y[n - 1 - i]).ln();
            (2 * i + 1) as f64 * (lo + hi)
        })
        .sum();
    let a2 = -nf - s / nf;
    let a2_star = a2 * (1.0 + 0.75 / nf + 2.25 / (nf * nf));
    Ok(AndersonDarling {
        a2,
        a2_star,
        reject: a2_star > AD_CRITICAL_5,
    })
}

fn check_p(p: &[f64]) -> Result<()> {
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return invalid("p-values must lie in [0, 1]");
    }
    Ok(())
}

/// Benjamini–Hochberg step-up procedure at FDR level `q`.
pub fn fdr_bh(p: &[f64], q: f64) -> Result<Vec<bool>> {
    check_p(p)?;
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let cutoff = order
        .iter()
        .enumerate()
        .filter(|(i, &k)| p[k] <= (i + 1) as f64 * q / m as f64)
        .map(|(i, _)| i + 1)
        .max()
        .unwrap_or(0);
    let mut reject = vec![false; m];
    for &k in &order[..cutoff] {
        reject[k] = true;
    }
    Ok(reject)
}

/// Bonferroni correction: reject where `p ≤ α/m`.
pub fn bonferroni(p: &[f64], alpha: f64) -> Result<Vec<bool>> {
    check_p(p)?;
    let thr = alpha / p.len() as f64;
    Ok(p.iter().map(|&v| v <= thr).collect())
}
