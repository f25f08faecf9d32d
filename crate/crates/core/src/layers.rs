//! GRU and MLP building blocks, in plain-vector and graph form.
//!
//! GRU gates follow
//!
//! ```text
//! z  = σ(W_z x + U_z h + b_z)
//! r  = σ(W_r x + U_r h + b_r)
//! h̃  = tanh(W_h x + U_h (r ⊙ h) + b_h)
//! h' = (1 − z) ⊙ h + z ⊙ h̃
//! ```
//!
//! The three input matrices are stored side by side as `w: [in, 3·hidden]`
//! (column blocks z, r, h), the recurrent ones as `u_zr: [hidden,
//! 2·hidden]` and `u_h: [hidden, hidden]`, and the biases as
//! `b: [3·hidden]`.

use rand::Rng;

use crate::attention::uniform_tensor;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{self, sigmoid};
use crate::params::{Bound, Params};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w: Tensor,
    pub u_zr: Tensor,
    pub u_h: Tensor,
    pub b: Tensor,
}

impl GruParams {
    pub fn new(w: Tensor, u_zr: Tensor, u_h: Tensor, b: Tensor) -> Result<Self> {
        let (input, three) = match w.shape() {
            [i, n] if n % 3 == 0 && *n > 0 => (*i, *n),
            s => return Err(Error::shape("gru", format!("w {s:?}"))),
        };
        let hid = three / 3;
        if u_zr.shape() != [hid, 2 * hid] || u_h.shape() != [hid, hid] || b.shape() != [three] {
            return Err(Error::shape(
                "gru",
                format!(
                    "input {input}, hidden {hid}: u_zr {:?}, u_h {:?}, b {:?}",
                    u_zr.shape(),
                    u_h.shape(),
                    b.shape()
                ),
            ));
        }
        Ok(GruParams { w, u_zr, u_h, b })
    }

    pub fn init<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        GruParams {
            w: uniform_tensor(&[input, 3 * hidden], input, rng),
            u_zr: uniform_tensor(&[hidden, 2 * hidden], hidden, rng),
            u_h: uniform_tensor(&[hidden, hidden], hidden, rng),
            b: uniform_tensor(&[3 * hidden], hidden, rng),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        GruParams {
            w: Tensor::zeros(&[input, 3 * hidden]),
            u_zr: Tensor::zeros(&[hidden, 2 * hidden]),
            u_h: Tensor::zeros(&[hidden, hidden]),
            b: Tensor::zeros(&[3 * hidden]),
        }
    }

    pub fn input_width(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.u_h.shape()[0]
    }

    pub fn insert_into(self, params: &mut Params, prefix: &str) -> Result<()> {
        params.insert(format!("{prefix}.w"), self.w)?;
        params.insert(format!("{prefix}.u_zr"), self.u_zr)?;
        params.insert(format!("{prefix}.u_h"), self.u_h)?;
        params.insert(format!("{prefix}.b"), self.b)
    }

    pub fn from_params(params: &Params, prefix: &str) -> Result<Self> {
        GruParams::new(
            params.get(&format!("{prefix}.w"))?.clone(),
            params.get(&format!("{prefix}.u_zr"))?.clone(),
            params.get(&format!("{prefix}.u_h"))?.clone(),
            params.get(&format!("{prefix}.b"))?.clone(),
        )
    }
}

/// One GRU step on plain vectors.
pub fn gru_cell(x: &[f64], h: &[f64], p: &GruParams) -> Result<Vec<f64>> {
    let (input, hid) = (p.input_width(), p.hidden());
    if x.len() != input || h.len() != hid {
        return Err(Error::shape(
            "gru_cell",
            format!("x {} / h {} for input {input}, hidden {hid}", x.len(), h.len()),
        ));
    }
    let mut xp = vec![0.0; 3 * hid];
    kernels::matmul_acc(x, p.w.data(), 1, input, 3 * hid, &mut xp);
    xp.iter_mut().zip(p.b.data()).for_each(|(v, bi)| *v += bi);
    let mut hp = vec![0.0; 2 * hid];
    kernels::matmul_acc(h, p.u_zr.data(), 1, hid, 2 * hid, &mut hp);
    let z: Vec<f64> = (0..hid).map(|i| sigmoid(xp[i] + hp[i])).collect();
    let r: Vec<f64> = (0..hid).map(|i| sigmoid(xp[hid + i] + hp[hid + i])).collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    let mut uh = vec![0.0; hid];
    kernels::matmul_acc(&rh, p.u_h.data(), 1, hid, hid, &mut uh);
    Ok((0..hid)
        .map(|i| (1.0 - z[i]) * h[i] + z[i] * (xp[2 * hid + i] + uh[i]).tanh())
        .collect())
}

/// Runs a GRU over `inputs` from a zero state. With `reverse` parameters
/// an independent backward pass is concatenated onto every state, giving
/// `2·hidden` columns.
pub fn gru_sequence(
    inputs: &[Vec<f64>],
    forward: &GruParams,
    reverse: Option<&GruParams>,
) -> Result<Vec<Vec<f64>>> {
    if inputs.is_empty() {
        return Err(Error::contract("gru_sequence needs at least one step"));
    }
    let run = |p: &GruParams, order: &mut dyn Iterator<Item = usize>| -> Result<Vec<Vec<f64>>> {
        let mut h = vec![0.0; p.hidden()];
        let mut states = vec![Vec::new(); inputs.len()];
        for t in order {
            h = gru_cell(&inputs[t], &h, p)?;
            states[t] = h.clone();
        }
        Ok(states)
    };
    let mut states = run(forward, &mut (0..inputs.len()))?;
    if let Some(rev) = reverse {
        let back = run(rev, &mut (0..inputs.len()).rev())?;
        for (s, b) in states.iter_mut().zip(back) {
            s.extend(b);
        }
    }
    Ok(states)
}

/// Graph handles of one GRU direction.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w: Var,
    pub u_zr: Var,
    pub u_h: Var,
    pub b: Var,
}

impl GruVars {
    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(GruVars {
            w: bound.get(&format!("{prefix}.w"))?,
            u_zr: bound.get(&format!("{prefix}.u_zr"))?,
            u_h: bound.get(&format!("{prefix}.u_h"))?,
            b: bound.get(&format!("{prefix}.b"))?,
        })
    }

    pub fn constant(g: &mut Graph, p: &GruParams) -> Self {
        GruVars {
            w: g.constant(p.w.clone()),
            u_zr: g.constant(p.u_zr.clone()),
            u_h: g.constant(p.u_h.clone()),
            b: g.constant(p.b.clone()),
        }
    }
}

/// One direction over `inputs: [batch, steps, in]`; returns one
/// `[batch, hidden]` state per step in input order.
fn gru_direction(g: &mut Graph, p: &GruVars, inputs: Var, reverse: bool) -> Result<Vec<Var>> {
    let (batch, steps, input) = match g.shape(inputs) {
        [b, t, i] => (*b, *t, *i),
        s => return Err(Error::shape("gru", format!("inputs must be [batch, steps, in], got {s:?}"))),
    };
    if steps == 0 {
        return Err(Error::contract("gru_sequence needs at least one step"));
    }
    let hid = g.shape(p.u_h)[0];
    let flat = g.reshape(inputs, &[batch * steps, input])?;
    let proj = g.matmul(flat, p.w)?;
    let proj = g.add_row(proj, p.b)?;
    let proj = g.reshape(proj, &[batch, steps, 3 * hid])?;
    let mut h = g.constant(Tensor::zeros(&[batch, hid]));
    let mut states = vec![h; steps];
    let order: Vec<usize> = if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
    for t in order {
        let xt = g.slice(proj, 1, t, 1)?;
        let xt = g.reshape(xt, &[batch, 3 * hid])?;
        let x_zr = g.slice(xt, 1, 0, 2 * hid)?;
        let x_h = g.slice(xt, 1, 2 * hid, hid)?;
        let h_zr = g.matmul(h, p.u_zr)?;
        let pre = g.add(x_zr, h_zr)?;
        let zr = g.sigmoid(pre)?;
        let z = g.slice(zr, 1, 0, hid)?;
        let r = g.slice(zr, 1, hid, hid)?;
        let rh = g.mul(r, h)?;
        let uh = g.matmul(rh, p.u_h)?;
        let cand = g.add(x_h, uh)?;
        let cand = g.tanh(cand)?;
        // (1 − z)⊙h + z⊙h̃ = h + z⊙(h̃ − h)
        let diff = g.sub(cand, h)?;
        let step = g.mul(z, diff)?;
        h = g.add(h, step)?;
        states[t] = h;
    }
    Ok(states)
}

/// GRU over `inputs: [batch, steps, in]`, giving `[batch, steps, hidden]`
/// (or `2·hidden` with a reverse direction).
pub fn gru_sequence_graph(
    g: &mut Graph,
    forward: &GruVars,
    reverse: Option<&GruVars>,
    inputs: Var,
) -> Result<Var> {
    let stack = |g: &mut Graph, states: Vec<Var>| -> Result<Var> {
        let (b, h) = (g.shape(states[0])[0], g.shape(states[0])[1]);
        let rows = states
            .into_iter()
            .map(|s| g.reshape(s, &[b, 1, h]))
            .collect::<Result<Vec<_>>>()?;
        g.concat(&rows, 1)
    };
    let fwd = gru_direction(g, forward, inputs, false)?;
    let fwd = stack(g, fwd)?;
    match reverse {
        None => Ok(fwd),
        Some(rev) => {
            let bwd = gru_direction(g, rev, inputs, true)?;
            let bwd = stack(g, bwd)?;
            g.concat(&[fwd, bwd], 2)
        }
    }
}

/// Final forward state of a unidirectional GRU, `[batch, hidden]`.
pub fn gru_final_graph(g: &mut Graph, p: &GruVars, inputs: Var) -> Result<Var> {
    let states = gru_direction(g, p, inputs, false)?;
    Ok(*states.last().expect("at least one step"))
}

/// Fully connected layers with ReLU between them and a linear output.
/// Layer `i` stores `w: [in, out]` and `b: [out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<(Tensor, Tensor)>,
}

impl MlpParams {
    pub fn new(layers: Vec<(Tensor, Tensor)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("an MLP needs at least one layer"));
        }
        let mut prev: Option<usize> = None;
        for (i, (w, b)) in layers.iter().enumerate() {
            let ok = matches!(w.shape(), [input, out] if b.shape() == [*out] && prev.is_none_or(|p| p == *input));
            if !ok {
                return Err(Error::shape(
                    "mlp",
                    format!("layer {i}: w {:?}, b {:?}", w.shape(), b.shape()),
                ));
            }
            prev = Some(w.shape()[1]);
        }
        Ok(MlpParams { layers })
    }

    /// Layers for consecutive `widths`, e.g. `[in, hidden, out]`.
    pub fn init<R: Rng>(widths: &[usize], rng: &mut R) -> Result<Self> {
        let layers = widths
            .windows(2)
            .map(|w| {
                (
                    uniform_tensor(&[w[0], w[1]], w[0], rng),
                    uniform_tensor(&[w[1]], w[0], rng),
                )
            })
            .collect();
        MlpParams::new(layers)
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].0.shape()[0]];
        w.extend(self.layers.iter().map(|(l, _)| l.shape()[1]));
        w
    }

    pub fn insert_into(self, params: &mut Params, prefix: &str) -> Result<()> {
        for (i, (w, b)) in self.layers.into_iter().enumerate() {
            params.insert(format!("{prefix}.{i}.w"), w)?;
            params.insert(format!("{prefix}.{i}.b"), b)?;
        }
        Ok(())
    }

    pub fn from_params(params: &Params, prefix: &str) -> Result<Self> {
        let mut layers = Vec::new();
        while params.contains(&format!("{prefix}.{}.w", layers.len())) {
            let i = layers.len();
            layers.push((
                params.get(&format!("{prefix}.{i}.w"))?.clone(),
                params.get(&format!("{prefix}.{i}.b"))?.clone(),
            ));
        }
        MlpParams::new(layers)
    }
}

pub fn mlp_forward(x: &[f64], p: &MlpParams) -> Result<Vec<f64>> {
    let mut cur = x.to_vec();
    let last = p.layers.len() - 1;
    for (i, (w, b)) in p.layers.iter().enumerate() {
        let (input, out) = (w.shape()[0], w.shape()[1]);
        if cur.len() != input {
            return Err(Error::shape("mlp", format!("layer {i} expects {input}, got {}", cur.len())));
        }
        let mut next = vec![0.0; out];
        kernels::matmul_acc(&cur, w.data(), 1, input, out, &mut next);
        next.iter_mut().zip(b.data()).for_each(|(v, bi)| *v += bi);
        if i != last {
            next.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        cur = next;
    }
    Ok(cur)
}

/// Graph handles of an MLP.
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
}

impl MlpVars {
    /// Binds layers `prefix.0`, `prefix.1`, ... until one is missing.
    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        let mut layers = Vec::new();
        while let Ok(w) = bound.get(&format!("{prefix}.{}.w", layers.len())) {
            let b = bound.get(&format!("{prefix}.{}.b", layers.len()))?;
            layers.push((w, b));
        }
        if layers.is_empty() {
            return Err(Error::Config(format!("no layers bound under {prefix}")));
        }
        Ok(MlpVars { layers })
    }

    pub fn constant(g: &mut Graph, p: &MlpParams) -> Self {
        MlpVars {
            layers: p
                .layers
                .iter()
                .map(|(w, b)| (g.constant(w.clone()), g.constant(b.clone())))
                .collect(),
        }
    }

    /// Applies the MLP to every row of `x: [n, in]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut cur = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let y = g.matmul(cur, w)?;
            cur = g.add_row(y, b)?;
            if i != last {
                cur = g.relu(cur)?;
            }
        }
        Ok(cur)
    }
}
