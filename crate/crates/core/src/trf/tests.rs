use super::*;
use crate::numerics::rng::seeded;
use crate::stats::pearson;
use crate::synthdata::{pink_noise, EegData, Kernel};
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

fn ar1(n: usize, rho: f64, seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed);
    let mut x = 0.0;
    (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut rng);
            x = rho * x + e;
            x
        })
        .collect()
}

#[test]
fn envelope_of_a_sinusoid() {
    let rate = 1000.0;
    let x: Vec<f64> = (0..2000).map(|i| 1.7 * (2.0 * std::f64::consts::PI * 13.3 * i as f64 / rate).sin()).collect();
    let env = hilbert_envelope(&x, rate).unwrap();
    for &e in &env[500..1500] {
        assert!((e - 1.7).abs() < 0.02 * 1.7, "{e}");
    }
    assert!(hilbert_envelope(&vec![0.0; 64], rate).unwrap().iter().all(|&v| v == 0.0));
    assert!(hilbert_envelope(&[1.0, 2.0, 3.0], rate).is_err());
}

#[test]
fn envelope_tracks_a_slow_bump() {
    let rate = 1000.0;
    let bump: Vec<f64> = (0..4000)
        .map(|i| (-(i as f64 - 2000.0).powi(2) / (2.0 * 400.0f64.powi(2))).exp())
        .collect();
    let x: Vec<f64> = bump
        .iter()
        .enumerate()
        .map(|(i, b)| b * (2.0 * std::f64::consts::PI * 50.0 * i as f64 / rate).sin())
        .collect();
    let env = hilbert_envelope(&x, rate).unwrap();
    assert!(pearson(&env, &bump).unwrap() > 0.99);
}

#[test]
fn block_means() {
    assert_eq!(block_mean(&[1.0, 3.0, 5.0, 7.0, 9.0], 2).unwrap(), vec![2.0, 6.0, 9.0]);
    assert!(block_mean(&[1.0], 0).is_err());
}

#[test]
fn unvoiced_runs_get_one_voiced_value() {
    let series = [1.0, 4.0, f64::NAN, f64::NAN, 2.0, f64::NAN, 3.0];
    let voiced = [true, true, false, false, true, false, true];
    let a = interpolate_unvoiced(&series, &voiced, &mut seeded(1)).unwrap();
    assert_eq!(a[2], a[3]);
    for i in [2, 5] {
        assert!([1.0, 4.0, 2.0, 3.0].contains(&a[i]));
    }
    for i in [0, 1, 4, 6] {
        assert_eq!(a[i], series[i]);
    }
    let b = interpolate_unvoiced(&series, &voiced, &mut seeded(1)).unwrap();
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(interpolate_unvoiced(&[1.0, 2.0], &[true, true], &mut seeded(1)).unwrap(), vec![1.0, 2.0]);
    assert!(interpolate_unvoiced(&[1.0, 2.0], &[false, false], &mut seeded(1)).is_err());
    assert!(interpolate_unvoiced(&[1.0], &[true, false], &mut seeded(1)).is_err());
}

#[test]
fn lag_window_arithmetic() {
    let w = LagWindow::standard(100.0);
    let lags = w.lags();
    assert_eq!((lags[0], *lags.last().unwrap(), lags.len()), (-15, 75, 91));
    assert_eq!(w.nominal_bounds(), (-10, 70));
    let nominal = w.nominal_positions();
    assert_eq!((nominal.len(), nominal[0]), (81, 5));

    let x = ar1(300, 0.5, 2);
    let zero = vec![0.0; 300];
    let d = build_lagged_design(&[&x, &zero], &w).unwrap();
    assert_eq!(d.x.shape(), &[300, 182]);
    assert_eq!(d.nominal_columns.len(), 162);
    assert!((0..300).all(|t| d.x.row(t)[91..].iter().all(|&v| v == 0.0)));
    // Column of lag +3 at t holds x[t − 3].
    let col = 18;
    assert_eq!(lags[col], 3);
    assert_eq!(d.x.get2(10, col), x[7]);
    assert_eq!(d.x.get2(2, col), 0.0);
    assert!(build_lagged_design(&[&x[..50]], &w).is_err());
}

#[test]
fn zero_lag_design_is_transposed_predictors() {
    let w = LagWindow {
        min_ms: 0.0,
        max_ms: 0.0,
        margin_ms: 0.0,
        rate: 64.0,
    };
    let a = ar1(20, 0.0, 3);
    let b = ar1(20, 0.0, 4);
    let d = build_lagged_design(&[&a, &b], &w).unwrap();
    for t in 0..20 {
        assert_eq!(d.x.row(t), &[a[t], b[t]]);
    }
}

fn random_design(n: usize, p: usize, seed: u64) -> Tensor {
    Tensor::randn(&[n, p], 1.0, &mut seeded(seed))
}

#[test]
fn ridge_recovers_noiseless_weights() {
    let x = random_design(200, 6, 5);
    let w_true = vec![1.0, -2.0, 0.5, 0.0, 3.0, -0.25];
    let y = x.matmul(&Tensor::matrix(6, 1, w_true.clone()).unwrap()).unwrap().into_data();
    let w = ridge_fit(&x, &y, 0.0).unwrap();
    for (a, b) in w.iter().zip(&w_true) {
        assert!((a - b).abs() < 1e-8);
    }
    let big = ridge_fit(&x, &y, 1e12).unwrap();
    assert!(big.iter().all(|v| v.abs() < 1e-6));
}

#[test]
fn ridge_on_orthonormal_columns_shrinks_uniformly() {
    let q = crate::synthdata::random_orthonormal(50, 4, &mut seeded(6)).unwrap();
    let y = ar1(50, 0.3, 7);
    let lambda = 2.5;
    let w = ridge_fit(&q, &y, lambda).unwrap();
    let xty = q.transpose().unwrap().matmul(&Tensor::matrix(50, 1, y.clone()).unwrap()).unwrap();
    for (a, b) in w.iter().zip(xty.data()) {
        assert!((a - b / (1.0 + lambda)).abs() < 1e-12);
    }
}

#[test]
fn ridge_singular_without_penalty() {
    let base = random_design(30, 2, 8);
    let mut data = Vec::new();
    for r in 0..30 {
        data.extend_from_slice(&[base.get2(r, 0), base.get2(r, 1), base.get2(r, 0)]);
    }
    let x = Tensor::matrix(30, 3, data).unwrap();
    let y = ar1(30, 0.0, 9);
    assert!(matches!(ridge_fit(&x, &y, 0.0), Err(Error::Singular(_))));
    assert!(ridge_fit(&x, &y, 1e-3).is_ok());
    assert!(ridge_fit(&x, &y, -1.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ridge_normal_equations_hold(seed in 0u64..1000, lambda in 0.01f64..100.0) {
        let x = random_design(40, 5, seed);
        let y = ar1(40, 0.2, seed + 1);
        let w = ridge_fit(&x, &y, lambda).unwrap();
        let wt = Tensor::matrix(5, 1, w.clone()).unwrap();
        let resid: Vec<f64> = x.matmul(&wt).unwrap().data().iter().zip(&y).map(|(p, o)| o - p).collect();
        let xt = x.transpose().unwrap();
        let g = xt.matmul(&Tensor::matrix(40, 1, resid).unwrap()).unwrap();
        let xty = xt.matmul(&Tensor::matrix(40, 1, y).unwrap()).unwrap();
        let grad: f64 = g.data().iter().zip(&w).map(|(a, b)| (a - lambda * b).powi(2)).sum::<f64>().sqrt();
        prop_assert!(grad < 1e-8 * xty.sq_norm().sqrt());
    }
}

fn config(rate: f64) -> TrfConfig {
    TrfConfig::standard(rate)
}

/// `[T, channels]` from per-channel series.
fn stack(channels: &[Vec<f64>]) -> Tensor {
    let n = channels[0].len();
    let data = (0..n).flat_map(|t| channels.iter().map(move |c| c[t])).collect();
    Tensor::matrix(n, channels.len(), data).unwrap()
}

fn convolve(k: &Kernel, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    k.apply(x, &mut y);
    y
}

#[test]
fn identical_noiseless_trials_predict_perfectly() {
    let rate = 64.0;
    let x = ar1(400, 0.8, 10);
    let k = Kernel::biphasic(rate, 150.0, 1.0);
    let y = stack(&[convolve(&k, &x)]);
    let trials: Vec<Vec<&[f64]>> = (0..4).map(|_| vec![&x[..]]).collect();
    let set = DesignSet::new(&trials, &config(rate).window).unwrap();
    let stats = ResponseStats::new(&set, &vec![y; 4]).unwrap();
    let res = loo_cv(&set, &stats, &config(rate)).unwrap();
    for row in &res.r {
        assert!(row[0] > 1.0 - 1e-6, "{}", row[0]);
    }
    assert_eq!(res.lambda.len(), 4);
}

#[test]
fn pure_noise_responses_give_null_accuracy() {
    let rate = 64.0;
    let preds: Vec<Vec<f64>> = (0..8).map(|k| ar1(300, 0.8, 20 + k)).collect();
    let trials: Vec<Vec<&[f64]>> = preds.iter().map(|p| vec![&p[..]]).collect();
    let set = DesignSet::new(&trials, &config(rate).window).unwrap();
    let mut rng = seeded(11);
    let ys: Vec<Tensor> = (0..8)
        .map(|_| stack(&[pink_noise(300, 1.0, &mut rng), pink_noise(300, 1.0, &mut rng)]))
        .collect();
    let stats = ResponseStats::new(&set, &ys).unwrap();
    let res = loo_cv(&set, &stats, &config(rate)).unwrap();
    let r: Vec<f64> = res.r.iter().flatten().copied().collect();
    let mean = r.iter().sum::<f64>() / r.len() as f64;
    let sd = (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r.len() - 1) as f64).sqrt();
    assert!(mean.abs() < 2.0 * sd / (r.len() as f64).sqrt(), "{mean} (sd {sd})");
}

#[test]
fn kernel_is_recovered_at_high_snr() {
    let rate = 64.0;
    let k = Kernel::biphasic(rate, 150.0, 1.0);
    let mut rng = seeded(12);
    let preds: Vec<Vec<f64>> = (0..6).map(|i| ar1(600, 0.5, 30 + i)).collect();
    let ys: Vec<Tensor> = preds
        .iter()
        .map(|p| {
            let clean = convolve(&k, p);
            let noise = pink_noise(600, 0.01, &mut rng);
            stack(&[clean.iter().zip(&noise).map(|(a, b)| a + b).collect()])
        })
        .collect();
    let trials: Vec<Vec<&[f64]>> = preds.iter().map(|p| vec![&p[..]]).collect();
    let cfg = config(rate);
    let set = DesignSet::new(&trials, &cfg.window).unwrap();
    let stats = ResponseStats::new(&set, &ys).unwrap();
    let model = fit_trf(&set, &stats, &[1.0], cfg.window).unwrap();
    let est = model.kernel(0, 0);
    let truth: Vec<f64> = cfg
        .window
        .lags()
        .iter()
        .map(|&l| {
            let i = l - k.start_lag;
            if (0..k.taps.len() as i64).contains(&i) {
                k.taps[i as usize]
            } else {
                0.0
            }
        })
        .collect();
    assert!(pearson(&est, &truth).unwrap() > 0.95);

    let pred = model.predict(&set.designs[0], false).unwrap();
    assert!(pearson(pred.data(), ys[0].data()).unwrap() > 0.95);
}

#[test]
fn rescaled_predictor_leaves_accuracy_unchanged() {
    let rate = 64.0;
    let k = Kernel::biphasic(rate, 120.0, 1.0);
    let mut rng = seeded(13);
    let preds: Vec<Vec<f64>> = (0..4).map(|i| ar1(300, 0.7, 40 + i)).collect();
    let ys: Vec<Tensor> = preds
        .iter()
        .map(|p| {
            let noise = pink_noise(300, 0.5, &mut rng);
            stack(&[convolve(&k, p).iter().zip(&noise).map(|(a, b)| a + b).collect()])
        })
        .collect();
    let scaled: Vec<Vec<f64>> = preds.iter().map(|p| p.iter().map(|v| 7.5 * v).collect()).collect();
    let cfg = config(rate);
    let run = |ps: &[Vec<f64>]| {
        let trials: Vec<Vec<&[f64]>> = ps.iter().map(|p| vec![&p[..]]).collect();
        let set = DesignSet::new(&trials, &cfg.window).unwrap();
        let stats = ResponseStats::new(&set, &ys).unwrap();
        loo_cv(&set, &stats, &cfg).unwrap()
    };
    let (a, b) = (run(&preds), run(&scaled));
    assert_eq!(a.lambda, b.lambda);
    for (x, y) in a.r.iter().flatten().zip(b.r.iter().flatten()) {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn loo_rejects_too_few_trials_and_bad_grids() {
    let x = ar1(200, 0.5, 14);
    let trials: Vec<Vec<&[f64]>> = vec![vec![&x[..]], vec![&x[..]]];
    let cfg = config(64.0);
    let set = DesignSet::new(&trials, &cfg.window).unwrap();
    let y = stack(&[x.clone()]);
    let stats = ResponseStats::new(&set, &[y.clone(), y.clone()]).unwrap();
    assert!(loo_cv(&set, &stats, &cfg).is_err());
    assert!(ResponseStats::new(&set, &[y.clone()]).is_err());
    let mut bad = cfg.clone();
    bad.lambdas.clear();
    assert!(bad.validate().is_err());
}

fn small_eeg(ic: &[Vec<f64>], env: &[Vec<f64>], participants: usize, coupled: bool, seed: u64) -> EegData {
    let rate = 64.0;
    let ki = Kernel::biphasic(rate, 150.0, 1.0);
    let ke = Kernel::biphasic(rate, 120.0, 1.0);
    let mut rng = seeded(seed);
    let responses = (0..participants)
        .map(|_| {
            ic.iter()
                .zip(env)
                .map(|(i, e)| {
                    let n = i.len();
                    let a = convolve(&ke, e);
                    let b = convolve(&ki, i);
                    let ch0: Vec<f64> = (0..n).map(|t| a[t] + if coupled { b[t] } else { 0.0 }).collect();
                    let noise0 = pink_noise(n, 1.0, &mut rng);
                    let noise1 = pink_noise(n, 1.0, &mut rng);
                    stack(&[
                        ch0.iter().zip(&noise0).map(|(x, y)| x + y).collect(),
                        a.iter().zip(&noise1).map(|(x, y)| x + y).collect(),
                    ])
                })
                .collect()
        })
        .collect();
    EegData { responses }
}

#[test]
fn delta_r_identity_and_coupled_channel() {
    let ic: Vec<Vec<f64>> = (0..5).map(|i| ar1(400, 0.9, 50 + i)).collect();
    let env: Vec<Vec<f64>> = (0..5).map(|i| ar1(400, 0.9, 60 + i)).collect();
    let data = small_eeg(&ic, &env, 6, true, 15);
    let res = delta_r_pipeline(&data, &ic, &env, &config(64.0)).unwrap();
    for p in &res.participants {
        let dr = p.delta_r();
        for (k, row) in dr.iter().enumerate() {
            for (j, d) in row.iter().enumerate() {
                assert_eq!(*d, p.full.r[k][j] - p.reduced.r[k][j]);
            }
        }
        assert_eq!(p.full.r.len(), 5);
    }
    assert!(res.channels[0].mean_delta_r > 0.05);
    assert_eq!(res.channels[0].n_positive, 6);
    assert_eq!(res.participant_summary.len(), 6);

    let mut buf = Vec::new();
    write_encoding_csv(&mut buf, "h", 3, "x", &res).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 6 * 5 * 2);
    let mut buf = Vec::new();
    write_topography_csv(&mut buf, "h", 3, "x", &res).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
}

#[test]
fn redundant_ic_adds_nothing() {
    let env: Vec<Vec<f64>> = (0..5).map(|i| ar1(400, 0.9, 70 + i)).collect();
    let data = small_eeg(&env, &env, 4, false, 16);
    let res = delta_r_pipeline(&data, &env, &env, &config(64.0)).unwrap();
    let d: Vec<f64> = res.participants.iter().flat_map(|p| p.delta_r().concat()).collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
    assert!(mean.abs() <= 2.0 * sd / (d.len() as f64).sqrt() + 1e-9, "{mean} {sd}");
    assert!(res.channels.iter().all(|c| !c.significant));
}

#[test]
fn mismatched_predictors_are_rejected() {
    let a = ar1(300, 0.5, 17);
    let full = vec![a.clone(); 3];
    let data = small_eeg(&full, &full, 1, false, 18);
    let short = vec![a[..299].to_vec(); 3];
    assert!(delta_r_pipeline(&data, &short, &full, &config(64.0)).is_err());
    assert!(delta_r_pipeline(&data, &short, &short, &config(64.0)).is_err());
}
