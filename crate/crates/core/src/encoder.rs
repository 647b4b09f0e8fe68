//! Diffusion graph convolution and the historical / future-guided encoder stacks.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Row-normalized forward (`A`) and backward (`Aᵀ`) transition matrices, `[T, N, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionPair {
    pub forward: Tensor,
    pub backward: Tensor,
}

fn row_normalize(m: &mut [f64], n: usize) {
    for i in 0..n {
        let row = &mut m[i * n..(i + 1) * n];
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|x| *x /= s);
        } else {
            row.iter_mut().for_each(|x| *x = 0.0);
            row[i] = 1.0;
        }
    }
}

/// Rows with zero out-degree become self-loops.
pub fn transition_matrices(a: &Tensor) -> Result<TransitionPair> {
    let s = a.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::dim("transition_matrices", s, &[0, 0, 0]));
    }
    let (t, n) = (s[0], s[1]);
    let mut fwd = a.clone();
    let mut bwd = Tensor::zeros(s);
    for k in 0..t {
        for i in 0..n {
            for j in 0..n {
                bwd.set(&[k, i, j], a.get(&[k, j, i]));
            }
        }
        row_normalize(&mut fwd.data_mut()[k * n * n..(k + 1) * n * n], n);
        row_normalize(&mut bwd.data_mut()[k * n * n..(k + 1) * n * n], n);
    }
    Ok(TransitionPair {
        forward: fwd,
        backward: bwd,
    })
}

/// Chebyshev polynomial `T_k(X)` of a square matrix by the three-term recurrence.
pub fn chebyshev(k: usize, x: &Tensor) -> Result<Tensor> {
    Ok(chebyshev_series(k, x)?.pop().expect("k + 1 terms"))
}

/// `[T_0(X), ..., T_k(X)]`.
pub fn chebyshev_series(k: usize, x: &Tensor) -> Result<Vec<Tensor>> {
    let s = x.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::dim("chebyshev", s, &[s.first().copied().unwrap_or(0); 2]));
    }
    let mut out = vec![Tensor::eye(s[0])];
    if k >= 1 {
        out.push(x.clone());
    }
    for i in 2..=k {
        let two_x_prev = x.matmul(&out[i - 1])?.map(|v| 2.0 * v);
        let data = two_x_prev
            .data()
            .iter()
            .zip(out[i - 2].data())
            .map(|(a, b)| a - b)
            .collect();
        out.push(Tensor::new(s.to_vec(), data)?);
    }
    Ok(out)
}

/// Applies `chebyshev_series` per timestep of a `[T, N, N]` stack, returning
/// orders `1..=k` as `[T, N, N]` tensors.
fn chebyshev_stack(k: usize, mats: &Tensor) -> Result<Vec<Tensor>> {
    let t = mats.shape()[0];
    let mut per_order: Vec<Vec<Tensor>> = vec![Vec::with_capacity(t); k];
    for step in 0..t {
        let series = chebyshev_series(k, &mats.index0(step))?;
        for (order, m) in series.into_iter().skip(1).enumerate() {
            per_order[order].push(m);
        }
    }
    per_order.iter().map(|ms| Tensor::stack(ms)).collect()
}

/// Which graph filter a layer applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphFilter {
    /// Forward and backward Chebyshev diffusion of order 1..=K.
    Diffusion { order: usize },
    /// Symmetric-normalized `D^-1/2 (A + I) D^-1/2`.
    Simple,
}

impl GraphFilter {
    pub fn num_supports(self) -> usize {
        match self {
            GraphFilter::Diffusion { order } => 2 * order,
            GraphFilter::Simple => 1,
        }
    }

    /// Constant `[T, N, N]` operators for this filter, ordered
    /// forward orders 1..=K then backward orders 1..=K.
    pub fn supports(self, adjacency: &Tensor) -> Result<Vec<Tensor>> {
        match self {
            GraphFilter::Diffusion { order } => {
                let pair = transition_matrices(adjacency)?;
                let mut s = chebyshev_stack(order, &pair.forward)?;
                s.extend(chebyshev_stack(order, &pair.backward)?);
                Ok(s)
            }
            GraphFilter::Simple => Ok(vec![gcn_normalize(adjacency)]),
        }
    }
}

/// Per-timestep `D^-1/2 (A + I) D^-1/2` with degrees from `A + I`.
pub fn gcn_normalize(a: &Tensor) -> Tensor {
    let (t, n) = (a.shape()[0], a.shape()[1]);
    let mut out = Tensor::zeros(a.shape());
    for k in 0..t {
        let deg: Vec<f64> = (0..n)
            .map(|i| 1.0 + (0..n).map(|j| a.get(&[k, i, j])).sum::<f64>())
            .collect();
        for i in 0..n {
            for j in 0..n {
                let w = a.get(&[k, i, j]) + if i == j { 1.0 } else { 0.0 };
                out.set(&[k, i, j], w / (deg[i] * deg[j]).sqrt());
            }
        }
    }
    out
}

/// Repeats the last timestep of each `[T, N, N]` support `steps` times.
pub fn repeat_last(supports: &[Tensor], steps: usize) -> Result<Vec<Tensor>> {
    supports
        .iter()
        .map(|s| {
            let last = s.index0(s.shape()[0] - 1);
            Tensor::stack(&vec![last; steps])
        })
        .collect()
}

/// One graph convolution: `Σ_i S_i · H · Θ_i` over the filter's supports.
#[derive(Clone, Debug)]
pub struct GraphLayer {
    pub filter: GraphFilter,
    pub weights: Vec<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl GraphLayer {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        filter: GraphFilter,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        let names: Vec<String> = match filter {
            GraphFilter::Diffusion { order } => (1..=order)
                .map(|k| format!("{name}.theta_f.{k}"))
                .chain((1..=order).map(|k| format!("{name}.theta_b.{k}")))
                .collect(),
            GraphFilter::Simple => vec![format!("{name}.theta")],
        };
        let weights = names
            .iter()
            .map(|n| store.add_glorot(n, &[d_in, d_out], d_in, d_out, rng))
            .collect::<Result<_>>()?;
        Ok(GraphLayer {
            filter,
            weights,
            d_in,
            d_out,
        })
    }

    /// `h` is `[T, N, d_in]`; `supports` are tape constants of shape `[T, N, N]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        h: Var,
        supports: &[Var],
    ) -> Result<Var> {
        if supports.len() != self.weights.len() {
            return Err(Error::Contract(format!(
                "layer expects {} supports, got {}",
                self.weights.len(),
                supports.len()
            )));
        }
        let mut acc: Option<Var> = None;
        for (&s, &w) in supports.iter().zip(&self.weights) {
            let diffused = tape.batch_matmul(s, h)?;
            let theta = tape.param(store, w);
            let term = tape.matmul(diffused, theta)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        Ok(acc.expect("at least one support"))
    }
}

/// Three graph layers with a ReLU residual block in the middle:
/// `H1 = L1(X)`, `H2 = relu(L2(H1)) + H1`, `Ho = L3(H2)`.
#[derive(Clone, Debug)]
pub struct GraphStack {
    pub layers: [GraphLayer; 3],
}

impl GraphStack {
    /// `widths` are the output widths of the three layers.
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        filter: GraphFilter,
        d_in: usize,
        widths: [usize; 3],
    ) -> Result<Self> {
        if widths[1] != widths[0] {
            return Err(Error::Config(format!(
                "{name}: residual needs layer 2 width {} == layer 1 width {}",
                widths[1], widths[0]
            )));
        }
        let l1 = GraphLayer::new(store, rng, &format!("{name}.l1"), filter, d_in, widths[0])?;
        let l2 = GraphLayer::new(store, rng, &format!("{name}.l2"), filter, widths[0], widths[1])?;
        let l3 = GraphLayer::new(store, rng, &format!("{name}.l3"), filter, widths[1], widths[2])?;
        Ok(GraphStack {
            layers: [l1, l2, l3],
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x: Var,
        supports: &[Var],
    ) -> Result<Var> {
        let [l1, l2, l3] = &self.layers;
        let h1 = l1.forward(tape, store, x, supports)?;
        let z = l2.forward(tape, store, h1, supports)?;
        let z = tape.relu(z);
        let h2 = tape.add(z, h1)?;
        l3.forward(tape, store, h2, supports)
    }
}

/// The future-guided branch: learned time map T→F over the inputs, a graph
/// stack over the F steps, and a linear readout back to feature space.
#[derive(Clone, Debug)]
pub struct FutureBranch {
    pub time_map: ParamId,
    pub stack: GraphStack,
    pub readout_w: ParamId,
    pub readout_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub history: usize,
    pub horizon: usize,
    pub historical: GraphStack,
    pub future: Option<FutureBranch>,
}

/// Tape handles of the encoder outputs.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    /// `[T, N, d]`
    pub h_t: Var,
    /// `[F, N, d]`
    pub h_f: Option<Var>,
    /// `[T(+F), N, d]`
    pub h_cat: Var,
    /// `[F, N, C]`
    pub hf_features: Option<Var>,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        filter: GraphFilter,
        history: usize,
        horizon: usize,
        features: usize,
        width: usize,
        future_guided: bool,
    ) -> Result<Self> {
        let widths = [width; 3];
        let historical = GraphStack::new(store, rng, "enc_hist", filter, features, widths)?;
        let future = if future_guided {
            let time_map =
                store.add_glorot("enc_fut.time_map", &[horizon, history], history, horizon, rng)?;
            let stack = GraphStack::new(store, rng, "enc_fut", filter, features, widths)?;
            let readout_w =
                store.add_glorot("enc_fut.readout.w", &[width, features], width, features, rng)?;
            let readout_b = store.add_zeros("enc_fut.readout.b", &[features])?;
            Some(FutureBranch {
                time_map,
                stack,
                readout_w,
                readout_b,
            })
        } else {
            None
        };
        Ok(Encoder {
            history,
            horizon,
            historical,
            future,
        })
    }

    /// `x` is `[T, N, C]`; `hist_supports` are `[T, N, N]` and
    /// `future_supports` `[F, N, N]` tape constants.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x: Var,
        hist_supports: &[Var],
        future_supports: &[Var],
    ) -> Result<EncoderVars> {
        let h_t = self.historical.forward(tape, store, x, hist_supports)?;
        let Some(fb) = &self.future else {
            return Ok(EncoderVars {
                h_t,
                h_f: None,
                h_cat: h_t,
                hf_features: None,
            });
        };
        let xs = tape.value(x).shape().to_vec();
        let (t, n, c) = (xs[0], xs[1], xs[2]);
        let flat = tape.reshape(x, &[t, n * c])?;
        let map = tape.param(store, fb.time_map);
        let mapped = tape.matmul(map, flat)?;
        let xf = tape.reshape(mapped, &[self.horizon, n, c])?;
        let h_f = fb.stack.forward(tape, store, xf, future_supports)?;
        let w = tape.param(store, fb.readout_w);
        let b = tape.param(store, fb.readout_b);
        let lin = tape.matmul(h_f, w)?;
        let hf_features = tape.add(lin, b)?;
        let h_cat = tape.concat(&[h_t, h_f], 0)?;
        Ok(EncoderVars {
            h_t,
            h_f: Some(h_f),
            h_cat,
            hf_features: Some(hf_features),
        })
    }
}
