use rand::Rng;

use super::graph::{layer_norm_rows, Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_weight(format!("{name}.weight"), in_dim, out_dim, rng)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Dense stack with tanh between layers and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `dims` lists every width from input to output.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return invalid("an MLP needs an input and an output width");
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x)?;
            if i < last {
                x = g.tanh(x)?;
            }
        }
        Ok(x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Dense::params).collect()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }
}

/// Single-layer gated recurrent cell.
///
/// `z = σ(x Wz + h Uz + b)`, `r = σ(x Wr + h Ur + b)`,
/// `n = tanh(x Wn + b + r ⊙ (h Un + b))`, `h' = n + z ⊙ (h − n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruCell {
    input_update: Dense,
    input_reset: Dense,
    input_candidate: Dense,
    hidden_update: Dense,
    hidden_reset: Dense,
    hidden_candidate: Dense,
    pub in_dim: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dense = |suffix: &str, i: usize| Dense::new(store, &format!("{name}.{suffix}"), i, hidden, rng);
        Ok(Self {
            input_update: dense("wz", in_dim)?,
            input_reset: dense("wr", in_dim)?,
            input_candidate: dense("wn", in_dim)?,
            hidden_update: dense("uz", hidden)?,
            hidden_reset: dense("ur", hidden)?,
            hidden_candidate: dense("un", hidden)?,
            in_dim,
            hidden,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let xz = self.input_update.forward(g, store, x)?;
        let hz = self.hidden_update.forward(g, store, h)?;
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z)?;

        let xr = self.input_reset.forward(g, store, x)?;
        let hr = self.hidden_reset.forward(g, store, h)?;
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r)?;

        let xn = self.input_candidate.forward(g, store, x)?;
        let hn = self.hidden_candidate.forward(g, store, h)?;
        let gated = g.mul(r, hn)?;
        let n = g.add(xn, gated)?;
        let n = g.tanh(n)?;

        let diff = g.sub(h, n)?;
        let keep = g.mul(z, diff)?;
        g.add(n, keep)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [
            &self.input_update,
            &self.input_reset,
            &self.input_candidate,
            &self.hidden_update,
            &self.hidden_reset,
            &self.hidden_candidate,
        ]
        .iter()
        .flat_map(|d| d.params())
        .collect()
    }
}

/// Standardizes `x` along `axis` to zero mean and unit (biased) variance.
pub fn layer_norm_apply(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return invalid(format!("axis {axis} out of range for shape {:?}", shape));
    }
    let n = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    if inner == 1 {
        let flat = Tensor::matrix(outer, n, x.data().to_vec())?;
        let (y, _) = layer_norm_rows(&flat)?;
        return y.reshape(shape.to_vec());
    }
    if n < 2 {
        return invalid("layer norm needs at least two entries along the axis");
    }
    let mut out = x.data().to_vec();
    let src = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let mean = (0..n).map(|k| src[at(k)]).sum::<f64>() / n as f64;
            let var = (0..n).map(|k| (src[at(k)] - mean).powi(2)).sum::<f64>() / n as f64;
            if !(var > 0.0) {
                return Err(Error::Degenerate("zero variance along layer-norm axis".into()));
            }
            let s = 1.0 / var.sqrt();
            for k in 0..n {
                out[at(k)] = (src[at(k)] - mean) * s;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}
