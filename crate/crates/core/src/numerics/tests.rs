use proptest::prelude::*;

use super::rng::{Purpose, RngStreams};
use super::*;
use crate::error::Error;

#[test]
fn square_derivative() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::scalar(3.0)).unwrap();
    let mut g = Graph::new();
    let wv = g.param(&store, w).unwrap();
    let sq = g.square(wv).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.param(w).unwrap().data(), &[6.0]);
}

#[test]
fn constant_function_has_zero_gradient() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
    let mut g = Graph::new();
    let wv = g.param(&store, w).unwrap();
    let zero = g.scale(wv, 0.0).unwrap();
    let c = g.affine(zero, 1.0, 4.0).unwrap();
    let loss = g.sum(c).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.param(w).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::vector(vec![1.0, 2.0])).unwrap();
    assert!(matches!(g.backward(x), Err(Error::InvalidArgument(_))));
}

#[test]
fn non_finite_intermediate_is_rejected() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::vector(vec![1e300])).unwrap();
    assert!(matches!(g.square(x), Err(Error::NonFinite(_))));
}

#[test]
fn foreign_variable_is_rejected() {
    let mut a = Graph::new();
    let mut b = Graph::new();
    let x = a.variable(Tensor::scalar(1.0)).unwrap();
    let _ = a.variable(Tensor::scalar(1.0)).unwrap();
    let y = a.square(x).unwrap();
    let _ = b.variable(Tensor::scalar(1.0)).unwrap();
    assert!(b.tanh(y).is_err());
}

#[test]
fn sum_tanh_of_linear_matches_finite_differences() {
    let streams = RngStreams::new(7);
    let mut rng = streams.stream(Purpose::Init);
    let a = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::randn(&[4, 1], 0.5, &mut rng)).unwrap();
    let report = check::check_params(&store, 1e-5, |g, s| {
        let av = g.constant(a.clone())?;
        let wv = g.param(s, w)?;
        let y = g.matmul(av, wv)?;
        let t = g.tanh(y)?;
        g.sum(t)
    })
    .unwrap();
    assert_eq!(report.components, 4);
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = RngStreams::new(11).stream(Purpose::Init);
    let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let other = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let bias = Tensor::randn(&[4], 1.0, &mut rng);
    let w = Tensor::randn(&[4, 2], 1.0, &mut rng);
    let report = check::check_input(&x, 1e-5, |g, xv| {
        let o = g.constant(other.clone())?;
        let b = g.constant(bias.clone())?;
        let wv = g.constant(w.clone())?;
        let a = g.add_bias(xv, b)?;
        let s = g.sigmoid(a)?;
        let m = g.mul(s, xv)?;
        let d = g.sub(m, o)?;
        let r = g.scale_rows(d, vec![0.5, -1.0, 2.0])?;
        let c = g.scale_cols(r, vec![1.0, 2.0, 3.0, 4.0])?;
        let k = g.add_const(c, &other)?;
        let ln = g.layer_norm(k)?;
        let cat = g.concat_cols(&[ln, xv])?;
        let rows = g.concat_rows(&[cat, cat])?;
        let sq = g.square(rows)?;
        let mm = g.matmul(xv, wv)?;
        let th = g.tanh(mm)?;
        let a1 = g.mean(sq)?;
        let a2 = g.sum(th)?;
        let tot = g.add(a1, a2)?;
        g.affine(tot, 2.0, 1.0)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn gru_cell_matches_finite_differences() {
    let mut rng = RngStreams::new(3).stream(Purpose::Init);
    let mut store = ParamStore::new();
    let cell = GruCell::new(&mut store, "gru", 3, 4, &mut rng).unwrap();
    let x0 = Tensor::randn(&[2, 3], 1.0, &mut rng);
    let x1 = Tensor::randn(&[2, 3], 1.0, &mut rng);
    let report = check::check_params(&store, 1e-5, |g, s| {
        let h0 = g.constant(Tensor::zeros(&[2, 4]))?;
        let a = g.constant(x0.clone())?;
        let b = g.constant(x1.clone())?;
        let h1 = cell.forward(g, s, a, h0)?;
        let h2 = cell.forward(g, s, b, h1)?;
        let sq = g.square(h2)?;
        g.sum(sq)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn frozen_params_get_no_gradient() {
    let mut rng = RngStreams::new(1).stream(Purpose::Init);
    let mut store = ParamStore::new();
    let a = Dense::new(&mut store, "a", 2, 2, &mut rng).unwrap();
    let b = Dense::new(&mut store, "b", 2, 1, &mut rng).unwrap();
    let mut g = Graph::with_frozen(a.params());
    let x = g.constant(Tensor::randn(&[3, 2], 1.0, &mut rng)).unwrap();
    let h = a.forward(&mut g, &store, x).unwrap();
    let y = b.forward(&mut g, &store, h).unwrap();
    let loss = g.sum(y).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.param(a.weight).is_none());
    assert!(grads.param(b.weight).is_some());
}

#[test]
fn reused_param_accumulates() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::scalar(2.0)).unwrap();
    let mut g = Graph::new();
    let a = g.param(&store, w).unwrap();
    let b = g.param(&store, w).unwrap();
    assert_eq!(a, b);
    let m = g.mul(a, b).unwrap();
    let loss = g.sum(m).unwrap();
    assert_eq!(g.backward(loss).unwrap().param(w).unwrap().data(), &[4.0]);
}

fn adam_reference(p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64], t: i32, lr: f64) {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    for j in 0..p.len() {
        m[j] = b1 * m[j] + (1.0 - b1) * g[j];
        v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
        let mh = m[j] / (1.0 - b1.powi(t));
        let vh = v[j] / (1.0 - b2.powi(t));
        p[j] -= lr * (mh / (vh.sqrt() + eps) + 0.0 * p[j]);
    }
}

proptest! {
    #[test]
    fn adamw_without_decay_is_adam(
        init in prop::collection::vec(-3.0f64..3.0, 4),
        grads in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), 1..6),
    ) {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(init.clone())).unwrap();
        let mut state = OptimizerState::new(&store);
        let opt = AdamW { lr: 1e-2, ..AdamW::default() };
        let (mut p, mut m, mut v) = (init, vec![0.0; 4], vec![0.0; 4]);
        for (t, g) in grads.iter().enumerate() {
            opt.step(&mut store, &[Some(Tensor::vector(g.clone()))], &mut state, opt.lr).unwrap();
            adam_reference(&mut p, &mut m, &mut v, g, t as i32 + 1, 1e-2);
        }
        prop_assert_eq!(store.get(id).data(), p.as_slice());
    }

    #[test]
    fn layer_norm_rows_standardize(rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 5), 1..5)) {
        let x = Tensor::from_rows(&rows).unwrap();
        if let Ok((y, _)) = layer_norm_rows(&x) {
            for r in 0..y.rows() {
                let row = y.row(r);
                let mean = row.iter().sum::<f64>() / 5.0;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((var - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn training_trajectory_is_bit_identical() {
    let run = || {
        let streams = RngStreams::new(5);
        let mut init = streams.stream(Purpose::Init);
        let mut data = streams.stream(Purpose::Data);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 8, 1], &mut init).unwrap();
        let mut state = OptimizerState::new(&store);
        let opt = AdamW { lr: 1e-2, weight_decay: 0.01, ..AdamW::default() };
        for _ in 0..20 {
            let x = Tensor::randn(&[16, 3], 1.0, &mut data);
            let mut g = Graph::new();
            let xv = g.constant(x).unwrap();
            let y = mlp.forward(&mut g, &store, xv).unwrap();
            let sq = g.square(y).unwrap();
            let loss = g.mean(sq).unwrap();
            let grads = g.backward(loss).unwrap().for_store(&store);
            opt.step(&mut store, &grads, &mut state, opt.lr).unwrap();
        }
        store
    };
    assert_eq!(run(), run());
}
