//! Hybrid scalar/vector layers that commute with rotations, reflections and
//! uniform scaling.
//!
//! On the tape a hybrid block is a pair of optional variables: scalars
//! `[rows, C_h]` and vectors `[rows, 3, C_v]`. A block with zero channels of
//! one kind stores `None` for it. Weight tensors are kept input-major
//! (`[in, out]`) so a layer is a right multiplication; [`array`] offers the
//! same layers on plain arrays with output-major weights.

pub mod array;

use std::collections::BTreeMap;

use rand::Rng;

use crate::diffcore::{DiffError, Tape, Tensor, Var};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum LayerError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error("invalid channel plan: {0}")]
    Channels(String),
}

/// Named weight tensors, ordered by name.
pub type ParamMap = BTreeMap<String, Tensor>;

/// Parameters bound to tape variables for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Registers every tensor of `params` as a tape parameter.
    pub fn bind(tape: &mut Tape, params: &ParamMap) -> Result<Self, DiffError> {
        let mut vars = BTreeMap::new();
        for (name, t) in params {
            vars.insert(name.clone(), tape.param(name.clone(), t.clone())?);
        }
        Ok(Self { vars })
    }

    pub fn get(&self, name: &str) -> Result<Var, LayerError> {
        self.vars.get(name).copied().ok_or_else(|| LayerError::MissingParam(name.to_string()))
    }

    /// Wraps variables that are already on the tape.
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn find(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

/// A hybrid feature block on the tape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hybrid {
    pub h: Option<Var>,
    pub v: Option<Var>,
}

impl Hybrid {
    pub fn scalar_channels(&self, tape: &Tape) -> usize {
        self.h.map_or(0, |h| tape.value(h).last_dim())
    }

    pub fn vector_channels(&self, tape: &Tape) -> usize {
        self.v.map_or(0, |v| tape.value(v).last_dim())
    }

    pub fn rows(&self, tape: &Tape) -> usize {
        self.h.or(self.v).map_or(0, |x| tape.value(x).shape()[0])
    }
}

/// Channel counts of one hybrid layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct HybridDims {
    pub in_h: usize,
    pub in_v: usize,
    pub out_h: usize,
    pub out_v: usize,
}

fn uniform_tensor<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, shape: &[usize]) -> Tensor {
    let a = (1.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-a..=a)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Adds a plain dense layer `x W + b` with `W: [in, out]`.
pub fn init_linear<R: Rng + ?Sized>(
    params: &mut ParamMap,
    prefix: &str,
    inputs: usize,
    outputs: usize,
    bias: bool,
    rng: &mut R,
) {
    params.insert(format!("{prefix}.w"), uniform_tensor(rng, inputs, &[inputs, outputs]));
    if bias {
        params.insert(format!("{prefix}.b"), uniform_tensor(rng, inputs, &[outputs]));
    }
}

pub fn linear(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var) -> Result<Var, LayerError> {
    let y = tape.matmul(x, p.get(&format!("{prefix}.w"))?)?;
    match p.find(&format!("{prefix}.b")) {
        Some(b) => Ok(tape.add(y, b)?),
        None => Ok(y),
    }
}

/// Adds the weights of a hybrid linear layer.
///
/// Names: `w_h [in_h, out_h]`, `w_vh [in_v, out_h]`, `w_v [in_v, out_v]`,
/// `w_hv [in_h, out_v]`, and `b_h [out_h]` when `scalar_bias` is set.
pub fn init_hybrid_linear<R: Rng + ?Sized>(
    params: &mut ParamMap,
    prefix: &str,
    dims: HybridDims,
    scalar_bias: bool,
    rng: &mut R,
) -> Result<(), LayerError> {
    let HybridDims { in_h, in_v, out_h, out_v } = dims;
    if in_h + in_v == 0 || out_h + out_v == 0 {
        return Err(LayerError::Channels(format!("{prefix}: a layer needs input and output channels")));
    }
    if out_v > 0 && in_v == 0 {
        return Err(LayerError::Channels(format!("{prefix}: vector outputs need vector inputs")));
    }
    if out_h > 0 {
        if in_h > 0 {
            params.insert(format!("{prefix}.w_h"), uniform_tensor(rng, in_h, &[in_h, out_h]));
        }
        if in_v > 0 {
            params.insert(format!("{prefix}.w_vh"), uniform_tensor(rng, in_v, &[in_v, out_h]));
        }
        if scalar_bias {
            params.insert(format!("{prefix}.b_h"), uniform_tensor(rng, in_h + in_v, &[out_h]));
        }
    }
    if out_v > 0 {
        params.insert(format!("{prefix}.w_v"), uniform_tensor(rng, in_v, &[in_v, out_v]));
        if in_h > 0 {
            params.insert(format!("{prefix}.w_hv"), uniform_tensor(rng, in_h, &[in_h, out_v]));
        }
    }
    Ok(())
}

/// Adds the direction weights `w_q [C_v, 1]` of a vector ReLU.
pub fn init_vec_relu<R: Rng + ?Sized>(params: &mut ParamMap, prefix: &str, channels: usize, rng: &mut R) {
    params.insert(format!("{prefix}.w_q"), uniform_tensor(rng, channels, &[channels, 1]));
}

/// Row-wise invariant `⟨v_c, v̄/‖v̄‖⟩` for `v: [R, 3, C]`, giving `[R, C]`.
///
/// With `normalized` the result is further divided by its own norm, which
/// also removes any positive scale.
pub fn invariance(tape: &mut Tape, v: Var, normalized: bool) -> Result<Var, LayerError> {
    let shape = tape.value(v).shape().to_vec();
    let [rows, d, c] = shape[..] else {
        return Err(LayerError::Channels(format!("vector block must be rank 3, got {shape:?}")));
    };
    let avg = tape.constant(Tensor::new(vec![c, 1], vec![1.0 / c as f64; c])?)?;
    let mean = tape.matmul(v, avg)?;
    let mean = tape.reshape(mean, vec![rows, d])?;
    let dir = tape.normalize(mean)?;
    let omega = tape.inner(v, dir)?;
    let omega = tape.reshape(omega, vec![rows, c])?;
    if normalized {
        Ok(tape.normalize(omega)?)
    } else {
        Ok(omega)
    }
}

/// `h' = h W_h + Ω(V) W_vh`, `V' = (V W_v) ⊙ n(h W_hv)`.
///
/// Without scalar inputs the vector path is ungated, `V' = V W_v`.
pub fn hybrid_linear(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    x: Hybrid,
    normalized_omega: bool,
) -> Result<Hybrid, LayerError> {
    let mut h_terms = Vec::with_capacity(2);
    if let (Some(h), Some(w)) = (x.h, p.find(&format!("{prefix}.w_h"))) {
        h_terms.push(tape.matmul(h, w)?);
    }
    if let (Some(v), Some(w)) = (x.v, p.find(&format!("{prefix}.w_vh"))) {
        let omega = invariance(tape, v, normalized_omega)?;
        h_terms.push(tape.matmul(omega, w)?);
    }
    let mut h_out = match h_terms.as_slice() {
        [] => None,
        [a] => Some(*a),
        [a, b] => Some(tape.add(*a, *b)?),
        _ => unreachable!(),
    };
    if let (Some(h), Some(b)) = (h_out, p.find(&format!("{prefix}.b_h"))) {
        h_out = Some(tape.add(h, b)?);
    }
    let v_out = match (x.v, p.find(&format!("{prefix}.w_v"))) {
        (Some(v), Some(w)) => {
            let lin = tape.matmul(v, w)?;
            match (x.h, p.find(&format!("{prefix}.w_hv"))) {
                (Some(h), Some(w_hv)) => {
                    let g = tape.matmul(h, w_hv)?;
                    let g = tape.normalize(g)?;
                    Some(tape.mul(lin, g)?)
                }
                _ => Some(lin),
            }
        }
        (None, Some(_)) => return Err(LayerError::Channels(format!("{prefix}: vector weights but no vector input"))),
        _ => None,
    };
    if h_out.is_none() && v_out.is_none() {
        return Err(LayerError::MissingParam(format!("{prefix}.w_h")));
    }
    Ok(Hybrid { h: h_out, v: v_out })
}

/// Vector ReLU with learned direction `q = V w_q`.
pub fn vec_relu(tape: &mut Tape, p: &BoundParams, prefix: &str, v: Var) -> Result<Var, LayerError> {
    let shape = tape.value(v).shape().to_vec();
    let q = tape.matmul(v, p.get(&format!("{prefix}.w_q"))?)?;
    let q = tape.reshape(q, vec![shape[0], shape[1]])?;
    let q = tape.normalize(q)?;
    Ok(tape.vec_relu(v, q)?)
}

/// Scalar ReLU plus vector ReLU.
pub fn hybrid_relu(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Hybrid) -> Result<Hybrid, LayerError> {
    let h = x.h.map(|h| tape.relu(h)).transpose()?;
    let v = x.v.map(|v| vec_relu(tape, p, prefix, v)).transpose()?;
    Ok(Hybrid { h, v })
}

/// Concatenates hybrid blocks channel-wise; all parts share the row count.
pub fn concat_hybrid(tape: &mut Tape, parts: &[Hybrid]) -> Result<Hybrid, LayerError> {
    let hs: Vec<Var> = parts.iter().filter_map(|p| p.h).collect();
    let vs: Vec<Var> = parts.iter().filter_map(|p| p.v).collect();
    let h = if hs.is_empty() { None } else { Some(tape.concat(&hs)?) };
    let v = if vs.is_empty() { None } else { Some(tape.concat(&vs)?) };
    Ok(Hybrid { h, v })
}

/// Gathers rows of both blocks.
pub fn gather_hybrid(tape: &mut Tape, x: Hybrid, idx: &std::sync::Arc<[usize]>) -> Result<Hybrid, LayerError> {
    let h = x.h.map(|h| tape.gather_rows(h, idx.clone())).transpose()?;
    let v = x.v.map(|v| tape.gather_rows(v, idx.clone())).transpose()?;
    Ok(Hybrid { h, v })
}
