use std::io::Write;

use rayon::prelude::*;

use super::{build_lagged_design, solve_ridge, LagWindow, LaggedDesign, TrfModel};
use crate::error::{invalid, shape_err, Error, Result};
use crate::numerics::Tensor;
use crate::stats::{anderson_darling_normality, fdr_bh, paired_t, wilcoxon_signed_rank, ALPHA};
use crate::synthdata::EegData;

#[derive(Clone, Debug, PartialEq)]
pub struct TrfConfig {
    pub window: LagWindow,
    /// Candidate ridge strengths, in units of the z-scored design.
    pub lambdas: Vec<f64>,
    /// Inner folds for λ selection over the training trials; 0 means
    /// leave-one-out.
    pub inner_folds: usize,
}

impl TrfConfig {
    /// Standard window at `rate`, λ ∈ {10⁻³, …, 10⁶}, 3 inner folds.
    pub fn standard(rate: f64) -> Self {
        Self {
            window: LagWindow::standard(rate),
            lambdas: (-3..=6).map(|e| 10f64.powi(e)).collect(),
            inner_folds: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        if self.lambdas.is_empty() || self.lambdas.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return invalid("λ grid must be non-empty, finite and non-negative");
        }
        if self.inner_folds == 1 {
            return invalid("inner cross-validation needs at least 2 folds");
        }
        Ok(())
    }
}

/// Lagged designs of every trial with their centered second moments.
/// Built once per predictor set and shared by all participants.
#[derive(Clone, Debug)]
pub struct DesignSet {
    pub designs: Vec<LaggedDesign>,
    means: Vec<Vec<f64>>,
    /// Per-trial centered Gram `Σ (x − x̄)(x − x̄)ᵀ`, row-major.
    grams: Vec<Vec<f64>>,
}

fn column_means(x: &Tensor) -> Vec<f64> {
    let mut mean = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= x.rows() as f64);
    mean
}

fn centered_gram(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows();
    let mean = column_means(x);
    let mut xc = x.clone();
    for r in 0..n {
        for (v, m) in xc.row_mut(r).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let gram = xc.transpose().and_then(|t| t.matmul(&xc)).expect("square product");
    (mean, gram.into_data())
}

impl DesignSet {
    /// `trials[k]` lists the predictor series of trial `k`.
    pub fn new(trials: &[Vec<&[f64]>], window: &LagWindow) -> Result<Self> {
        if trials.is_empty() {
            return invalid("no trials");
        }
        let designs = trials
            .iter()
            .map(|preds| build_lagged_design(preds, window))
            .collect::<Result<Vec<_>>>()?;
        if designs.iter().any(|d| d.n_predictors != designs[0].n_predictors) {
            return shape_err("every trial needs the same predictors");
        }
        let (means, grams) = designs.iter().map(|d| centered_gram(&d.x)).unzip();
        Ok(Self { designs, means, grams })
    }

    pub fn n_trials(&self) -> usize {
        self.designs.len()
    }

    pub fn n_columns(&self) -> usize {
        self.designs[0].x.cols()
    }

    pub fn samples(&self, trial: usize) -> usize {
        self.designs[trial].x.rows()
    }
}

/// Per-trial cross moments of one participant's responses with a design.
#[derive(Clone, Debug)]
pub struct ResponseStats {
    channels: usize,
    y_mean: Vec<Vec<f64>>,
    y_ss: Vec<Vec<f64>>,
    /// Centered `Xᵀy`, `[columns, channels]` row-major.
    xty: Vec<Vec<f64>>,
}

impl ResponseStats {
    pub fn new(set: &DesignSet, responses: &[Tensor]) -> Result<Self> {
        if responses.len() != set.n_trials() {
            return shape_err(format!("{} response trials for {} designs", responses.len(), set.n_trials()));
        }
        let channels = responses[0].cols();
        let mut out = Self {
            channels,
            y_mean: vec![],
            y_ss: vec![],
            xty: vec![],
        };
        for (k, y) in responses.iter().enumerate() {
            let (n, c) = y.dims2()?;
            if n != set.samples(k) || c != channels {
                return shape_err(format!(
                    "trial {k}: response {n}x{c}, predictors have {} samples",
                    set.samples(k)
                ));
            }
            if !y.is_finite() {
                return Err(Error::NonFinite(format!("response of trial {k}")));
            }
            let mean = column_means(y);
            let mut yc = y.clone();
            for r in 0..n {
                for (v, m) in yc.row_mut(r).iter_mut().zip(&mean) {
                    *v -= m;
                }
            }
            let ss = (0..c).map(|j| (0..n).map(|r| yc.get2(r, j).powi(2)).sum()).collect();
            // Centering y alone suffices: Σ (x − x̄)(y − ȳ) = Σ x (y − ȳ).
            let xty = set.designs[k].x.transpose()?.matmul(&yc)?.into_data();
            out.y_mean.push(mean);
            out.y_ss.push(ss);
            out.xty.push(xty);
        }
        Ok(out)
    }
}

/// Pooled, z-scored normal equations of a set of training trials.
struct Pooled {
    p: usize,
    c: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    y_mean: Vec<f64>,
    /// `D⁻¹ C D⁻¹`.
    gram: Vec<f64>,
    /// `D⁻¹ Xᵀy`.
    xty: Vec<f64>,
}

impl Pooled {
    fn new(set: &DesignSet, stats: &ResponseStats, trials: &[usize]) -> Self {
        let p = set.n_columns();
        let c = stats.channels;
        let total: usize = trials.iter().map(|&k| set.samples(k)).sum();
        let mut mean = vec![0.0; p];
        let mut y_mean = vec![0.0; c];
        for &k in trials {
            let w = set.samples(k) as f64 / total as f64;
            for (m, v) in mean.iter_mut().zip(&set.means[k]) {
                *m += w * v;
            }
            for (m, v) in y_mean.iter_mut().zip(&stats.y_mean[k]) {
                *m += w * v;
            }
        }
        let mut gram = vec![0.0; p * p];
        let mut xty = vec![0.0; p * c];
        for &k in trials {
            let nk = set.samples(k) as f64;
            let dm: Vec<f64> = set.means[k].iter().zip(&mean).map(|(a, b)| a - b).collect();
            let dy: Vec<f64> = stats.y_mean[k].iter().zip(&y_mean).map(|(a, b)| a - b).collect();
            let g = &set.grams[k];
            for i in 0..p {
                for j in 0..p {
                    gram[i * p + j] += g[i * p + j] + nk * dm[i] * dm[j];
                }
                for j in 0..c {
                    xty[i * c + j] += stats.xty[k][i * c + j] + nk * dm[i] * dy[j];
                }
            }
        }
        let scale: Vec<f64> = (0..p)
            .map(|i| {
                let s = (gram[i * p + i] / total as f64).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        for i in 0..p {
            for j in 0..p {
                gram[i * p + j] /= scale[i] * scale[j];
            }
            for j in 0..c {
                xty[i * c + j] /= scale[i];
            }
        }
        Self {
            p,
            c,
            mean,
            scale,
            y_mean,
            gram,
            xty,
        }
    }

    /// Raw-unit weights `[p, c]` and biases at one λ.
    fn solve(&self, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut w = solve_ridge(&self.gram, &self.xty, self.p, self.c, lambda)?;
        for i in 0..self.p {
            for j in 0..self.c {
                w[i * self.c + j] /= self.scale[i];
            }
        }
        let bias = (0..self.c)
            .map(|j| self.y_mean[j] - (0..self.p).map(|i| self.mean[i] * w[i * self.c + j]).sum::<f64>())
            .collect();
        Ok((w, bias))
    }
}

/// Pearson r per channel between the nominal-window prediction and the
/// observed response of trial `k`, from second moments alone.
fn held_out_r(set: &DesignSet, stats: &ResponseStats, k: usize, w: &[f64]) -> Vec<f64> {
    let p = set.n_columns();
    let c = stats.channels;
    let nominal = &set.designs[k].nominal_columns;
    let g = &set.grams[k];
    (0..c)
        .map(|j| {
            let wj: Vec<f64> = (0..p).map(|i| w[i * c + j]).collect();
            let mut cross = 0.0;
            let mut quad = 0.0;
            for &a in nominal {
                cross += wj[a] * stats.xty[k][a * c + j];
                let row = &g[a * p..(a + 1) * p];
                quad += wj[a] * nominal.iter().map(|&b| row[b] * wj[b]).sum::<f64>();
            }
            let denom = (quad * stats.y_ss[k][j]).sqrt();
            if denom > 0.0 && denom.is_finite() {
                (cross / denom).clamp(-1.0, 1.0)
            } else {
                0.0
            }
        })
        .collect()
}

fn inner_splits(train: &[usize], folds: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    let k = if folds == 0 { train.len() } else { folds.min(train.len()) };
    (0..k)
        .map(|f| {
            let (held, fit): (Vec<(usize, usize)>, Vec<(usize, usize)>) =
                train.iter().copied().enumerate().partition(|(i, _)| i % k == f);
            (fit.into_iter().map(|x| x.1).collect(), held.into_iter().map(|x| x.1).collect())
        })
        .collect()
}

/// Best λ per channel by mean held-out r over inner folds of `train`.
fn select_lambda(set: &DesignSet, stats: &ResponseStats, train: &[usize], config: &TrfConfig) -> Result<Vec<f64>> {
    let c = stats.channels;
    let mut score = vec![vec![0.0; c]; config.lambdas.len()];
    let mut usable = vec![true; config.lambdas.len()];
    let splits = inner_splits(train, config.inner_folds);
    for (fit, held) in &splits {
        let pooled = Pooled::new(set, stats, fit);
        for (li, &lambda) in config.lambdas.iter().enumerate() {
            if !usable[li] {
                continue;
            }
            let w = match pooled.solve(lambda) {
                Ok((w, _)) => w,
                Err(Error::Singular(_)) => {
                    usable[li] = false;
                    continue;
                }
                Err(e) => return Err(e),
            };
            for &k in held {
                for (s, r) in score[li].iter_mut().zip(held_out_r(set, stats, k, &w)) {
                    *s += r;
                }
            }
        }
    }
    (0..c)
        .map(|j| {
            let mut best: Option<(f64, f64)> = None;
            for (li, &lambda) in config.lambdas.iter().enumerate() {
                if usable[li] && best.is_none_or(|(s, _)| score[li][j] > s) {
                    best = Some((score[li][j], lambda));
                }
            }
            best.map(|b| b.1)
                .ok_or_else(|| Error::Singular("every λ in the grid gave a singular system".into()))
        })
        .collect()
}

/// Fits one model per channel at the given ridge strengths on `trials`.
fn fit_channels(set: &DesignSet, stats: &ResponseStats, trials: &[usize], lambda: &[f64], window: LagWindow) -> Result<TrfModel> {
    let pooled = Pooled::new(set, stats, trials);
    let (p, c) = (pooled.p, pooled.c);
    let mut weights = vec![0.0; p * c];
    let mut bias = vec![0.0; c];
    // Channels sharing a λ share one factorization.
    let mut distinct: Vec<f64> = lambda.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    for l in distinct {
        let (w, b) = pooled.solve(l)?;
        for j in (0..c).filter(|&j| lambda[j] == l) {
            for i in 0..p {
                weights[i * c + j] = w[i * c + j];
            }
            bias[j] = b[j];
        }
    }
    Ok(TrfModel {
        weights: Tensor::matrix(p, c, weights)?,
        bias,
        lambda: lambda.to_vec(),
        window,
        n_predictors: set.designs[0].n_predictors,
    })
}

/// Held-out accuracy of every trial.
#[derive(Clone, Debug, PartialEq)]
pub struct LooResult {
    /// `[trial][channel]` Pearson r on the held-out trial.
    pub r: Vec<Vec<f64>>,
    /// `[trial][channel]` ridge strength chosen without that trial.
    pub lambda: Vec<Vec<f64>>,
}

/// Leave-one-trial-out cross-validation: for each held-out trial, λ is
/// chosen per channel on the remaining trials, the model is refit on all
/// of them and scored on the held-out trial with nominal-window lags.
pub fn loo_cv(set: &DesignSet, stats: &ResponseStats, config: &TrfConfig) -> Result<LooResult> {
    config.validate()?;
    let n = set.n_trials();
    if n < 3 {
        return invalid(format!("leave-one-out needs at least 3 trials, got {n}"));
    }
    let mut r = Vec::with_capacity(n);
    let mut lambda = Vec::with_capacity(n);
    for k in 0..n {
        let train: Vec<usize> = (0..n).filter(|&i| i != k).collect();
        let chosen = select_lambda(set, stats, &train, config)?;
        let model = fit_channels(set, stats, &train, &chosen, config.window)?;
        r.push(held_out_r(set, stats, k, model.weights.data()));
        lambda.push(chosen);
    }
    Ok(LooResult { r, lambda })
}

/// Fits on every trial with one λ per channel.
pub fn fit_trf(set: &DesignSet, stats: &ResponseStats, lambda: &[f64], window: LagWindow) -> Result<TrfModel> {
    if lambda.len() != stats.channels {
        return shape_err(format!("{} λ values for {} channels", lambda.len(), stats.channels));
    }
    let all: Vec<usize> = (0..set.n_trials()).collect();
    fit_channels(set, stats, &all, lambda, window)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParticipantFit {
    pub full: LooResult,
    pub reduced: LooResult,
}

impl ParticipantFit {
    /// `[trial][channel]` Δr.
    pub fn delta_r(&self) -> Vec<Vec<f64>> {
        self.full
            .r
            .iter()
            .zip(&self.reduced.r)
            .map(|(f, r)| f.iter().zip(r).map(|(a, b)| a - b).collect())
            .collect()
    }

    /// Trial-mean of `values[trial][channel]` per channel.
    fn trial_mean(values: &[Vec<f64>]) -> Vec<f64> {
        let c = values[0].len();
        (0..c)
            .map(|j| values.iter().map(|t| t[j]).sum::<f64>() / values.len() as f64)
            .collect()
    }

    pub fn mean_delta_r(&self) -> Vec<f64> {
        Self::trial_mean(&self.delta_r())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupTest {
    PairedT,
    Wilcoxon,
}

impl GroupTest {
    pub fn as_str(self) -> &'static str {
        match self {
            GroupTest::PairedT => "paired_t",
            GroupTest::Wilcoxon => "wilcoxon",
        }
    }
}

/// Group-level comparison of full and reduced accuracy on one channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelTest {
    pub channel: usize,
    pub mean_delta_r: f64,
    /// Participants whose trial-mean Δr is positive.
    pub n_positive: usize,
    pub test: GroupTest,
    pub p_value: f64,
    /// FDR rejection with a positive mean Δr.
    pub significant: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodingResult {
    pub participants: Vec<ParticipantFit>,
    /// Median over channels of each participant's trial-mean Δr.
    pub participant_summary: Vec<f64>,
    pub channels: Vec<ChannelTest>,
}

fn median(x: &[f64]) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn group_test(full: &[f64], reduced: &[f64]) -> Result<(GroupTest, f64)> {
    let diffs: Vec<f64> = full.iter().zip(reduced).map(|(a, b)| a - b).collect();
    let normal = match anderson_darling_normality(&diffs) {
        Ok(ad) => !ad.reject,
        Err(Error::Degenerate(_)) | Err(Error::InvalidArgument(_)) => false,
        Err(e) => return Err(e),
    };
    let outcome = if normal {
        paired_t(full, reduced).map(|t| (GroupTest::PairedT, t.p_value))
    } else {
        wilcoxon_signed_rank(full, reduced).map(|w| (GroupTest::Wilcoxon, w.p_value))
    };
    match outcome {
        Ok(v) => Ok(v),
        // No spread in the differences: nothing to reject.
        Err(Error::Degenerate(_)) | Err(Error::InvalidArgument(_)) => {
            Ok((if normal { GroupTest::PairedT } else { GroupTest::Wilcoxon }, 1.0))
        }
        Err(e) => Err(e),
    }
}

/// Full (IC + envelope) versus reduced (envelope) encoding models with
/// identical folds and λ protocol, then a per-channel group test across
/// participants with FDR control over channels.
pub fn delta_r_pipeline(
    data: &EegData,
    ic: &[Vec<f64>],
    envelope: &[Vec<f64>],
    config: &TrfConfig,
) -> Result<EncodingResult> {
    config.validate()?;
    if ic.len() != envelope.len() {
        return shape_err(format!("{} IC trials and {} envelope trials", ic.len(), envelope.len()));
    }
    if data.responses.is_empty() {
        return invalid("no participants");
    }
    for (k, (a, b)) in ic.iter().zip(envelope).enumerate() {
        if a.len() != b.len() {
            return shape_err(format!("trial {k}: IC and envelope are sampled differently"));
        }
    }
    let full_trials: Vec<Vec<&[f64]>> = ic.iter().zip(envelope).map(|(a, b)| vec![&a[..], &b[..]]).collect();
    let reduced_trials: Vec<Vec<&[f64]>> = envelope.iter().map(|b| vec![&b[..]]).collect();
    let full = DesignSet::new(&full_trials, &config.window)?;
    let reduced = DesignSet::new(&reduced_trials, &config.window)?;

    let participants = data
        .responses
        .par_iter()
        .map(|responses| -> Result<ParticipantFit> {
            let fs = ResponseStats::new(&full, responses)?;
            let rs = ResponseStats::new(&reduced, responses)?;
            Ok(ParticipantFit {
                full: loo_cv(&full, &fs, config)?,
                reduced: loo_cv(&reduced, &rs, config)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let c = participants[0].full.r[0].len();
    let participant_summary = participants.iter().map(|p| median(&p.mean_delta_r())).collect();
    let mut tests = Vec::with_capacity(c);
    let mut p_values = Vec::with_capacity(c);
    for j in 0..c {
        let f: Vec<f64> = participants.iter().map(|p| ParticipantFit::trial_mean(&p.full.r)[j]).collect();
        let r: Vec<f64> = participants.iter().map(|p| ParticipantFit::trial_mean(&p.reduced.r)[j]).collect();
        let d: Vec<f64> = f.iter().zip(&r).map(|(a, b)| a - b).collect();
        let (test, p) = group_test(&f, &r)?;
        p_values.push(p);
        tests.push(ChannelTest {
            channel: j,
            mean_delta_r: d.iter().sum::<f64>() / d.len() as f64,
            n_positive: d.iter().filter(|&&v| v > 0.0).count(),
            test,
            p_value: p,
            significant: false,
        });
    }
    let rejected = fdr_bh(&p_values, ALPHA)?;
    for (t, rej) in tests.iter_mut().zip(rejected) {
        t.significant = rej && t.mean_delta_r > 0.0;
    }
    Ok(EncodingResult {
        participants,
        participant_summary,
        channels: tests,
    })
}

/// One row per (participant, channel, trial).
pub fn write_encoding_csv<W: Write>(out: W, config_hash: &str, seed: u64, label: &str, result: &EncodingResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "config_hash",
        "seed",
        "label",
        "participant",
        "channel",
        "trial",
        "r_full",
        "r_reduced",
        "delta_r",
        "lambda_full",
        "lambda_reduced",
        "significant",
    ])?;
    for (pi, p) in result.participants.iter().enumerate() {
        let dr = p.delta_r();
        for (k, row) in dr.iter().enumerate() {
            for (j, d) in row.iter().enumerate() {
                w.write_record([
                    config_hash.to_string(),
                    seed.to_string(),
                    label.to_string(),
                    pi.to_string(),
                    j.to_string(),
                    k.to_string(),
                    p.full.r[k][j].to_string(),
                    p.reduced.r[k][j].to_string(),
                    d.to_string(),
                    p.full.lambda[k][j].to_string(),
                    p.reduced.lambda[k][j].to_string(),
                    u8::from(result.channels[j].significant).to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// One row per channel with its group test.
pub fn write_topography_csv<W: Write>(out: W, config_hash: &str, seed: u64, label: &str, result: &EncodingResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "config_hash",
        "seed",
        "label",
        "channel",
        "mean_delta_r",
        "n_positive",
        "n_participants",
        "test",
        "p_value",
        "significant",
    ])?;
    for t in &result.channels {
        w.write_record([
            config_hash.to_string(),
            seed.to_string(),
            label.to_string(),
            t.channel.to_string(),
            t.mean_delta_r.to_string(),
            t.n_positive.to_string(),
            result.participants.len().to_string(),
            t.test.as_str().to_string(),
            t.p_value.to_string(),
            u8::from(t.significant).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
