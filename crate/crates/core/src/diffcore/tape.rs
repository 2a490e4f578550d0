use std::collections::BTreeMap;
use std::sync::Arc;

use super::ops::{self, Primitive, Saved, NORMALIZE_EPS};
use super::{DiffError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    op: Option<Recorded>,
    requires_grad: bool,
}

struct Recorded {
    prim: Primitive,
    inputs: Vec<Var>,
    saved: Saved,
}

/// Max-pool gaps at or below this relative size count as ties between
/// values that differ only by rounding.
const TIE_TOLERANCE: f64 = 1e-12;

/// Smallest distance to a switching boundary per primitive family, over a
/// recorded tape. Exact zeros and rounding-level ties are skipped;
/// `normalize` is the smallest row norm above the zero guard.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SwitchingMargins {
    pub relu: f64,
    pub vec_relu: f64,
    pub max_pool: f64,
    pub normalize: f64,
}

impl Default for SwitchingMargins {
    fn default() -> Self {
        Self { relu: f64::INFINITY, vec_relu: f64::INFINITY, max_pool: f64::INFINITY, normalize: f64::INFINITY }
    }
}

impl SwitchingMargins {
    pub fn min(&self) -> f64 {
        self.relu.min(self.vec_relu).min(self.max_pool).min(self.normalize)
    }
}

/// Append-only record of primitive evaluations.
///
/// Nodes are stored in evaluation order, which is a topological order of the
/// computation DAG; [`Tape::backward`] walks it in reverse exactly once.
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new(), recording: true }
    }

    /// A tape that evaluates values but keeps no backward context.
    pub fn without_recording() -> Self {
        Self { recording: false, ..Self::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a named trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Result<Var, DiffError> {
        let name = name.into();
        if !value.is_finite() {
            return Err(DiffError::NonFinite { kind: "param" });
        }
        if self.params.contains_key(&name) {
            return Err(DiffError::DuplicateParam(name));
        }
        let v = self.push(value, None, self.recording);
        self.params.insert(name, v);
        Ok(v)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { kind: "constant" });
        }
        Ok(self.push(value, None, false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Distances of the recorded evaluation point from the non-smooth
    /// regions of its primitives.
    pub fn switching_margins(&self) -> SwitchingMargins {
        let mut m = SwitchingMargins::default();
        for node in &self.nodes {
            let Some(rec) = &node.op else { continue };
            let input = |k: usize| &self.nodes[rec.inputs[k].0].value;
            match &rec.prim {
                Primitive::Relu => {
                    for &x in input(0).data() {
                        if x != 0.0 {
                            m.relu = m.relu.min(x.abs());
                        }
                    }
                }
                Primitive::SafeNormalize => {
                    let x = input(0);
                    for row in x.data().chunks(x.last_dim().max(1)) {
                        let n = row.iter().map(|a| a * a).sum::<f64>().sqrt();
                        if n >= NORMALIZE_EPS {
                            m.normalize = m.normalize.min(n);
                        }
                    }
                }
                Primitive::VecRelu => {
                    let (v, q) = (input(0), input(1));
                    let c = v.last_dim();
                    let d = q.last_dim();
                    for (vr, qr) in v.data().chunks(d * c).zip(q.data().chunks(d)) {
                        if qr.iter().all(|x| *x == 0.0) {
                            continue;
                        }
                        for ch in 0..c {
                            let dot: f64 = (0..d).map(|k| vr[k * c + ch] * qr[k]).sum();
                            m.vec_relu = m.vec_relu.min(dot.abs());
                        }
                    }
                }
                Primitive::MaxReduce { group } if *group > 1 => {
                    let x = input(0);
                    let width = x.numel() / x.shape()[0].max(1);
                    for block in x.data().chunks(group * width) {
                        for col in 0..width {
                            let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                            for r in 0..*group {
                                let y = block[r * width + col];
                                if y > a {
                                    b = a;
                                    a = y;
                                } else if y > b {
                                    b = y;
                                }
                            }
                            if a - b > TIE_TOLERANCE * a.abs().max(1.0) {
                                m.max_pool = m.max_pool.min(a - b);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        m
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    fn push(&mut self, value: Tensor, op: Option<Recorded>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Evaluates `prim` on recorded values and appends the result.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var, DiffError> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (out, saved) = ops::forward(&prim, &values)?;
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = requires_grad.then(|| Recorded { prim, inputs: inputs.to_vec(), saved });
        Ok(self.push(out, op, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.apply(Primitive::Subtract, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.apply(Primitive::ChannelwiseMultiply, &[a, b])
    }

    pub fn normalize(&mut self, a: Var) -> Result<Var, DiffError> {
        self.apply(Primitive::SafeNormalize, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, DiffError> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, DiffError> {
        self.apply(Primitive::Sigmoid, &[a])
    }

    pub fn mean_reduce(&mut self, a: Var, group: usize) -> Result<Var, DiffError> {
        self.apply(Primitive::MeanReduce { group }, &[a])
    }

    pub fn max_reduce(&mut self, a: Var, group: usize) -> Result<Var, DiffError> {
        self.apply(Primitive::MaxReduce { group }, &[a])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.apply(Primitive::Concat, parts)
    }

    pub fn gather_rows(&mut self, a: Var, indices: Arc<[usize]>) -> Result<Var, DiffError> {
        self.apply(Primitive::GatherRows { indices }, &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, DiffError> {
        self.apply(Primitive::ScalarMultiply(s), &[a])
    }

    pub fn inner(&mut self, a: Var, u: Var) -> Result<Var, DiffError> {
        self.apply(Primitive::InnerProductRows, &[a, u])
    }

    pub fn vec_relu(&mut self, v: Var, q_unit: Var) -> Result<Var, DiffError> {
        self.apply(Primitive::VecRelu, &[v, q_unit])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, DiffError> {
        if self.value(a).shape() == shape.as_slice() {
            return Ok(a);
        }
        self.apply(Primitive::Reshape(shape), &[a])
    }

    pub fn bce(&mut self, pred: Var, target: Var) -> Result<Var, DiffError> {
        self.apply(Primitive::BinaryCrossEntropy, &[pred, target])
    }

    /// [`Tape::bce`] on logits; better conditioned when `sigmoid(logits)` saturates.
    pub fn bce_logits(&mut self, logits: Var, target: Var) -> Result<Var, DiffError> {
        self.apply(Primitive::LogitBinaryCrossEntropy, &[logits, target])
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, vec![n, 1])?;
        let mean = self.mean_reduce(flat, n)?;
        let mean = self.reshape(mean, vec![1])?;
        self.scale(mean, n as f64)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        if !self.recording {
            return Err(DiffError::NotRecording);
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(DiffError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::from_parts(loss_value.shape().to_vec(), vec![1.0]));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(rec) = &node.op else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = rec.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = rec.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let input_grads = ops::backward(&rec.prim, &inputs, &node.value, &rec.saved, &g, &needs);
            for ((v, need), ig) in rec.inputs.iter().zip(&needs).zip(input_grads) {
                if !need {
                    continue;
                }
                let Some(ig) = ig else { continue };
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }

        let params = self
            .params
            .iter()
            .map(|(name, v)| {
                let g = grads
                    .get_mut(v.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { params })
    }
}

/// `d loss / d param` for every named parameter on the tape.
#[derive(Clone, Debug)]
pub struct Gradients {
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}
