use std::collections::BTreeMap;

use rand::Rng;

use super::{Activation, NetworkParams, PathSet, LEAKY_SLOPE, LN_EPS};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::Adjacency;
use crate::odesolve::integrate;

/// Parameter tensors placed on a tape.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Places every parameter on `tape`, as tracked leaves when `track` is set
/// and as constants otherwise.
pub fn bind(tape: &mut Tape, params: &NetworkParams, track: bool) -> Bound {
    let vars = params
        .tensors
        .iter()
        .map(|(k, t)| {
            let v = if track {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            (k.clone(), v)
        })
        .collect();
    Bound { vars }
}

fn dense(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let z = tape.matmul(x, w)?;
    tape.add_bias(z, b)
}

/// Single-head additive attention restricted to the edges of `adj`.
///
/// `Z = H·W`, `s_ij = LeakyReLU(Z_i·u_src + Z_j·u_dst)`, rows of `s` are
/// softmaxed over the neighbours of `i`, and the output is `α·Z`. Edge
/// weights only decide which scores exist.
pub fn graph_attention(tape: &mut Tape, h: Var, adj: &Adjacency, p: &Bound) -> Result<Var> {
    let z = tape.matmul(h, p.get("ode.att_w")?)?;
    let src = tape.matmul(z, p.get("ode.att_src")?)?;
    let dst = tape.matmul(z, p.get("ode.att_dst")?)?;
    let s = tape.pair_sum(src, dst)?;
    let s = tape.leaky_relu(s, LEAKY_SLOPE);
    let alpha = tape.softmax_masked(s, adj.matrix())?;
    tape.matmul(alpha, z)
}

/// `f(H) = LayerNorm(H + attention(tanh(tanh(H·W1 + b1)·W2 + b2)))`.
pub fn ode_field(tape: &mut Tape, h: Var, adj: &Adjacency, p: &Bound) -> Result<Var> {
    let g = dense(tape, h, p.get("ode.w1")?, p.get("ode.b1")?)?;
    let g = tape.tanh(g);
    let g = dense(tape, g, p.get("ode.w2")?, p.get("ode.b2")?)?;
    let g = tape.tanh(g);
    let a = graph_attention(tape, g, adj, p)?;
    let r = tape.add(a, h)?;
    tape.layer_norm(r, p.get("ode.ln_gain")?, p.get("ode.ln_bias")?, LN_EPS)
}

/// Embeds feature `i` as `x_i·P_i + c_i`, integrates the field and
/// mean-pools the node states to `[1 × h]`.
pub fn ode_path(tape: &mut Tape, x: Var, adj: &Adjacency, p: &Bound, params: &NetworkParams) -> Result<Var> {
    let d = tape.value(x).len();
    if adj.dim() != d {
        return Err(Error::shape("ode_path adjacency", &[d, d], &[adj.dim(), adj.dim()]));
    }
    let h0 = tape.row_scale(p.get("ode.proj_w")?, x)?;
    let h0 = tape.add(h0, p.get("ode.proj_b")?)?;
    let mut field = |t: &mut Tape, s: Var| ode_field(t, s, adj, p);
    let h1 = integrate(tape, &mut field, h0, &params.config.solver)?;
    tape.mean_rows(h1)
}

/// Width-5 convolution across the feature axis, ReLU, then the mean over
/// positions: `[1 × h/2]`.
pub fn daubechies_path(tape: &mut Tape, x: Var, p: &Bound) -> Result<Var> {
    let c = tape.conv1d_same(x, p.get("daub.kernels")?, p.get("daub.bias")?)?;
    let c = tape.relu(c);
    tape.mean_rows(c)
}

/// `act((xᵀW_f) ⊙ a + b)`: `[1 × h/2]`, bounded in `[−1, 1]`.
pub fn parametric_path(tape: &mut Tape, x: Var, p: &Bound, activation: Activation) -> Result<Var> {
    let z = tape.matmul(x, p.get("param.w_f")?)?;
    let z = tape.mul(z, p.get("param.amp")?)?;
    let z = tape.add(z, p.get("param.phase")?)?;
    Ok(match activation {
        Activation::Sin => tape.sin(z),
        Activation::Tanh => tape.tanh(z),
    })
}

pub fn dense_path(tape: &mut Tape, x: Var, p: &Bound) -> Result<Var> {
    let z = dense(tape, x, p.get("dense.w")?, p.get("dense.b")?)?;
    Ok(tape.relu(z))
}

fn dropout<R: Rng + ?Sized>(tape: &mut Tape, v: Var, rate: f64, rng: Option<&mut R>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(v) };
    if rate == 0.0 {
        return Ok(v);
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = tape.value(v).shape().to_vec();
    let len: usize = shape.iter().product();
    let mask = (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let m = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(v, m)
}

fn run<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    adj: &Adjacency,
    params: &NetworkParams,
    p: &Bound,
    paths: PathSet,
    mut rng: Option<&mut R>,
) -> Result<Var> {
    let d = tape.value(x).len();
    if d != params.n_features {
        return Err(Error::shape("forward input", &[params.n_features], &[d]));
    }
    if paths.is_empty() {
        return Err(Error::InvalidArgument("every path is disabled".into()));
    }
    let cfg = &params.config;
    let mut parts = Vec::with_capacity(4);
    if paths.ode {
        parts.push(ode_path(tape, x, adj, p, params)?);
    }
    if paths.daubechies {
        parts.push(daubechies_path(tape, x, p)?);
    }
    if paths.parametric {
        parts.push(parametric_path(tape, x, p, cfg.activation)?);
    }
    if paths.dense {
        parts.push(dense_path(tape, x, p)?);
    }
    let hc = tape.concat(&parts)?;
    let w1 = p.get("head.w1")?;
    let expected = tape.value(w1).shape()[0];
    let width = tape.value(hc).len();
    if width != expected {
        return Err(Error::shape("head input", &[expected], &[width]));
    }

    let u1 = dense(tape, hc, w1, p.get("head.b1")?)?;
    let u1 = tape.relu(u1);
    let u1 = dropout(tape, u1, cfg.dropout, rng.as_deref_mut())?;
    let u2 = dense(tape, u1, p.get("head.w2")?, p.get("head.b2")?)?;
    let u2 = tape.relu(u2);
    let u2 = dropout(tape, u2, cfg.dropout, rng.as_deref_mut())?;
    let u3 = dense(tape, u2, p.get("head.w3")?, p.get("head.b3")?)?;
    let u3 = tape.relu(u3);
    let r = tape.add(u3, u1)?;
    dense(tape, r, p.get("head.w_out")?, p.get("head.b_out")?)
}

/// Scalar prediction `[1 × 1]`. Dropout is active only when `rng` is
/// given.
pub fn forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    adj: &Adjacency,
    params: &NetworkParams,
    p: &Bound,
    rng: Option<&mut R>,
) -> Result<Var> {
    run(tape, x, adj, params, p, params.config.paths, rng)
}

/// Forward pass with `disabled` paths left out of the concatenation. The
/// head must have been built for the remaining width.
pub fn ablation_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    adj: &Adjacency,
    params: &NetworkParams,
    p: &Bound,
    disabled: PathSet,
    rng: Option<&mut R>,
) -> Result<Var> {
    let paths = params.config.paths.without(disabled);
    run(tape, x, adj, params, p, paths, rng)
}

/// Eval-mode prediction for one standardized row.
pub fn predict(params: &NetworkParams, adj: &Adjacency, x: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = bind(&mut tape, params, false);
    let xv = tape.constant(Tensor::row(x.to_vec()));
    let out = forward::<rand_chacha::ChaCha8Rng>(&mut tape, xv, adj, params, &p, None)?;
    tape.value(out).item()
}

pub fn predict_many<'a>(
    params: &NetworkParams,
    adj: &Adjacency,
    rows: impl IntoIterator<Item = &'a [f64]>,
) -> Result<Vec<f64>> {
    rows.into_iter().map(|r| predict(params, adj, r)).collect()
}
