//! Single-feature versions of the hybrid layers on plain arrays.
//!
//! Weights here are output-major (`W: out × in`, row-major), so a layer reads
//! `h' = W_h h`. Evaluation goes through the same tape kernels as the model.

use serde::{Deserialize, Serialize};

use super::{BoundParams, Hybrid, HybridDims, LayerError, ParamMap};
use crate::diffcore::{Tape, Tensor};

/// One feature: `C_h` scalars and `C_v` vectors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HybridFeature {
    pub h: Vec<f64>,
    pub v: Vec<[f64; 3]>,
}

impl HybridFeature {
    pub fn new(h: Vec<f64>, v: Vec<[f64; 3]>) -> Result<Self, LayerError> {
        if h.is_empty() && v.is_empty() {
            return Err(LayerError::Channels("a feature needs at least one channel".into()));
        }
        if !h.iter().chain(v.iter().flatten()).all(|x| x.is_finite()) {
            return Err(LayerError::Diff(crate::diffcore::DiffError::NonFinite { kind: "feature" }));
        }
        Ok(Self { h, v })
    }
}

/// `W_h: out_h × in_h`, `W_v: out_v × in_v`, `W_hv: out_v × in_h`,
/// `W_vh: out_h × in_v`, all row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridLinearWeights {
    pub dims: HybridDims,
    pub w_h: Vec<f64>,
    pub w_v: Vec<f64>,
    pub w_hv: Vec<f64>,
    pub w_vh: Vec<f64>,
}

impl HybridLinearWeights {
    pub fn zeros(dims: HybridDims) -> Self {
        Self {
            dims,
            w_h: vec![0.0; dims.out_h * dims.in_h],
            w_v: vec![0.0; dims.out_v * dims.in_v],
            w_hv: vec![0.0; dims.out_v * dims.in_h],
            w_vh: vec![0.0; dims.out_h * dims.in_v],
        }
    }

    fn check(&self) -> Result<(), LayerError> {
        let d = self.dims;
        let ok = self.w_h.len() == d.out_h * d.in_h
            && self.w_v.len() == d.out_v * d.in_v
            && self.w_hv.len() == d.out_v * d.in_h
            && self.w_vh.len() == d.out_h * d.in_v;
        if !ok {
            return Err(LayerError::Channels(format!("weight sizes do not match {d:?}")));
        }
        if d.out_v > 0 && d.in_v == 0 {
            return Err(LayerError::Channels("vector outputs need vector inputs".into()));
        }
        Ok(())
    }

    /// Input-major tensors under the names used by [`super::hybrid_linear`].
    fn to_params(&self, prefix: &str) -> ParamMap {
        let d = self.dims;
        let mut m = ParamMap::new();
        let mut put = |name: &str, w: &[f64], out: usize, inp: usize| {
            if out > 0 && inp > 0 {
                m.insert(format!("{prefix}.{name}"), transpose(w, out, inp));
            }
        };
        put("w_h", &self.w_h, d.out_h, d.in_h);
        put("w_vh", &self.w_vh, d.out_h, d.in_v);
        put("w_v", &self.w_v, d.out_v, d.in_v);
        put("w_hv", &self.w_hv, d.out_v, d.in_h);
        m
    }
}

fn transpose(w: &[f64], out: usize, inp: usize) -> Tensor {
    let mut t = vec![0.0; w.len()];
    for o in 0..out {
        for i in 0..inp {
            t[i * out + o] = w[o * inp + i];
        }
    }
    Tensor::new(vec![inp, out], t).expect("sizes checked")
}

fn vector_tensor(v: &[[f64; 3]]) -> Tensor {
    let c = v.len();
    let mut data = vec![0.0; 3 * c];
    for (ch, x) in v.iter().enumerate() {
        for d in 0..3 {
            data[d * c + ch] = x[d];
        }
    }
    Tensor::new(vec![1, 3, c], data).expect("sizes match")
}

fn vectors_of(t: &Tensor) -> Vec<[f64; 3]> {
    let c = t.last_dim();
    (0..c).map(|ch| [t.data()[ch], t.data()[c + ch], t.data()[2 * c + ch]]).collect()
}

/// `Ω(V)_c = ⟨v_c, v̄/‖v̄‖⟩`; with `normalized` divided by its own norm.
pub fn invariance_map(v: &[[f64; 3]], normalized: bool) -> Result<Vec<f64>, LayerError> {
    if v.is_empty() {
        return Err(LayerError::Channels("invariance map needs a vector channel".into()));
    }
    let mut tape = Tape::without_recording();
    let x = tape.constant(vector_tensor(v))?;
    let o = super::invariance(&mut tape, x, normalized)?;
    Ok(tape.value(o).data().to_vec())
}

pub fn hybrid_linear(
    f: &HybridFeature,
    w: &HybridLinearWeights,
    normalized_omega: bool,
) -> Result<HybridFeature, LayerError> {
    w.check()?;
    let d = w.dims;
    if f.h.len() != d.in_h || f.v.len() != d.in_v {
        return Err(LayerError::Channels(format!(
            "feature has {} scalars and {} vectors, layer expects {} and {}",
            f.h.len(),
            f.v.len(),
            d.in_h,
            d.in_v
        )));
    }
    let mut tape = Tape::without_recording();
    let params = BoundParams::bind(&mut tape, &w.to_params("l"))?;
    let h = if f.h.is_empty() { None } else { Some(tape.constant(Tensor::new(vec![1, f.h.len()], f.h.clone())?)?) };
    let v = if f.v.is_empty() { None } else { Some(tape.constant(vector_tensor(&f.v))?) };
    let out = super::hybrid_linear(&mut tape, &params, "l", Hybrid { h, v }, normalized_omega)?;
    let h = match out.h {
        Some(h) => tape.value(h).data().to_vec(),
        None => vec![0.0; d.out_h],
    };
    let v = match out.v {
        Some(v) => vectors_of(tape.value(v)),
        None => vec![[0.0; 3]; d.out_v],
    };
    Ok(HybridFeature { h, v })
}

/// Vector ReLU with direction `q = Σ_c w_q[c] v_c`.
pub fn vec_relu(v: &[[f64; 3]], w_q: &[f64]) -> Result<Vec<[f64; 3]>, LayerError> {
    if v.is_empty() || w_q.len() != v.len() {
        return Err(LayerError::Channels(format!(
            "direction weights have {} entries for {} channels",
            w_q.len(),
            v.len()
        )));
    }
    let mut tape = Tape::without_recording();
    let mut m = ParamMap::new();
    m.insert("r.w_q".into(), Tensor::new(vec![w_q.len(), 1], w_q.to_vec())?);
    let params = BoundParams::bind(&mut tape, &m)?;
    let x = tape.constant(vector_tensor(v))?;
    let y = super::vec_relu(&mut tape, &params, "r", x)?;
    Ok(vectors_of(tape.value(y)))
}

pub fn scalar_relu(h: &[f64]) -> Vec<f64> {
    h.iter().map(|x| x.max(0.0)).collect()
}
