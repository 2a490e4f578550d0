use std::sync::Arc;

use rayon::prelude::*;

use super::{EquivarianceMode, Model, ModelConfig, ModelError};
use crate::diffcore::{Tape, Tensor, Var};
use crate::eqlayers::{self, BoundParams, Hybrid};
use crate::geometry::{farthest_point_sample, knn_table, nearest_indices, PointCloud};

/// Point counts per level: the full cloud, then `ceil(f * N)` for each
/// fraction, at least 1 and never more than the level above.
pub fn level_sizes(n: usize, fractions: &[f64]) -> Vec<usize> {
    let mut sizes = vec![n];
    for f in fractions {
        let m = ((f * n as f64).ceil() as usize).max(1).min(*sizes.last().unwrap());
        sizes.push(m);
    }
    sizes
}

/// Points and tape features of one encoder level.
#[derive(Clone, Debug)]
pub struct EncodedLevel {
    pub points: Vec<[f64; 3]>,
    pub features: Hybrid,
}

/// Output of [`encode_points`], finest level first.
#[derive(Clone, Debug)]
pub struct Encoding {
    pub levels: Vec<EncodedLevel>,
}

/// Tape-independent copy of an [`Encoding`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncodingValues {
    /// `(points, scalars [n, C_h], vectors [n, 3, C_v])` per level.
    pub levels: Vec<(Vec<[f64; 3]>, Option<Tensor>, Option<Tensor>)>,
}

impl Encoding {
    pub fn values(&self, tape: &Tape) -> EncodingValues {
        EncodingValues {
            levels: self
                .levels
                .iter()
                .map(|l| {
                    (
                        l.points.clone(),
                        l.features.h.map(|v| tape.value(v).clone()),
                        l.features.v.map(|v| tape.value(v).clone()),
                    )
                })
                .collect(),
        }
    }
}

impl EncodingValues {
    /// Places the features on `tape` as constants.
    pub fn load(&self, tape: &mut Tape) -> Result<Encoding, ModelError> {
        let mut levels = Vec::with_capacity(self.levels.len());
        for (points, h, v) in &self.levels {
            let h = h.clone().map(|t| tape.constant(t)).transpose()?;
            let v = v.clone().map(|t| tape.constant(t)).transpose()?;
            levels.push(EncodedLevel { points: points.clone(), features: Hybrid { h, v } });
        }
        Ok(Encoding { levels })
    }
}

fn layer(tape: &mut Tape, p: &BoundParams, cfg: &ModelConfig, prefix: &str, x: Hybrid) -> Result<Hybrid, ModelError> {
    if cfg.mode.is_equivariant() {
        Ok(eqlayers::hybrid_linear(tape, p, prefix, x, cfg.mode.normalized_invariant())?)
    } else {
        let h = x.h.ok_or_else(|| ModelError::Config(format!("{prefix}: no scalar input")))?;
        Ok(Hybrid { h: Some(eqlayers::linear(tape, p, prefix, h)?), v: None })
    }
}

fn activate(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Hybrid) -> Result<Hybrid, ModelError> {
    Ok(eqlayers::hybrid_relu(tape, p, prefix, x)?)
}

/// Two layers, each followed by the (hybrid) ReLU.
fn edge_mlp(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    prefix: &str,
    x: Hybrid,
) -> Result<Hybrid, ModelError> {
    let mut y = x;
    for i in 0..2 {
        y = layer(tape, p, cfg, &format!("{prefix}.fc{i}"), y)?;
        y = activate(tape, p, &format!("{prefix}.act{i}"), y)?;
    }
    Ok(y)
}

/// Max over each group of `k` rows for scalars, mean for vectors.
fn pool(tape: &mut Tape, x: Hybrid, k: usize) -> Result<Hybrid, ModelError> {
    let h = x.h.map(|h| tape.max_reduce(h, k)).transpose()?;
    let v = x.v.map(|v| tape.mean_reduce(v, k)).transpose()?;
    Ok(Hybrid { h, v })
}

/// Per-edge input block: optional center features, neighbor features, then
/// geometric terms (each `[E, 3]`), the latter as scalars in plain mode and
/// as one vector channel each otherwise.
fn edge_input(
    tape: &mut Tape,
    mode: EquivarianceMode,
    node: Hybrid,
    centers: Option<&Arc<[usize]>>,
    neighbors: &Arc<[usize]>,
    geometry: Vec<Tensor>,
) -> Result<Hybrid, ModelError> {
    let mut parts = Vec::with_capacity(3);
    if let Some(c) = centers {
        parts.push(eqlayers::gather_hybrid(tape, node, c)?);
    }
    parts.push(eqlayers::gather_hybrid(tape, node, neighbors)?);
    for g in geometry {
        let e = g.rows();
        if mode.is_equivariant() {
            let v = tape.constant(g.reshaped(vec![e, 3, 1])?)?;
            parts.push(Hybrid { h: None, v: Some(v) });
        } else {
            let h = tape.constant(g)?;
            parts.push(Hybrid { h: Some(h), v: None });
        }
    }
    Ok(eqlayers::concat_hybrid(tape, &parts)?)
}

fn coordinate_tensor(points: impl ExactSizeIterator<Item = [f64; 3]>) -> Tensor {
    let n = points.len();
    let data = points.flatten().collect();
    Tensor::new(vec![n, 3], data).expect("n x 3")
}

/// Runs the down pass (graph convolutions with FPS between levels) and the
/// up pass (nearest coarser feature plus skip, one layer each).
pub fn encode_points(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    cloud: &PointCloud,
) -> Result<Encoding, ModelError> {
    let sizes = level_sizes(cloud.len(), &cfg.fractions);
    let mut points = cloud.points().to_vec();
    let mut node = match cfg.mode {
        EquivarianceMode::Plain => Hybrid { h: Some(tape.constant(Tensor::from_points(&points))?), v: None },
        EquivarianceMode::So3 => Hybrid {
            h: None,
            v: Some(tape.constant(Tensor::from_points(&points).reshaped(vec![points.len(), 3, 1])?)?),
        },
        _ => Hybrid { h: None, v: None },
    };
    let mut levels: Vec<EncodedLevel> = Vec::with_capacity(sizes.len());
    for (l, &n) in sizes.iter().enumerate() {
        if l > 0 {
            let sel = farthest_point_sample(&points, n, 0)?;
            points = sel.iter().map(|&i| points[i]).collect();
            let sel: Arc<[usize]> = sel.into();
            node = eqlayers::gather_hybrid(tape, node, &sel)?;
        }
        let (table, k) = knn_table(&points, &points, cfg.k)?;
        let centers: Arc<[usize]> = (0..n).flat_map(|i| std::iter::repeat(i).take(k)).collect();
        let disp = coordinate_tensor(table.iter().zip(centers.iter()).map(|(&j, &i)| {
            let (a, b) = (points[j], points[i]);
            [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
        }));
        let neighbors: Arc<[usize]> = table.into();
        let x = edge_input(tape, cfg.mode, node, Some(&centers), &neighbors, vec![disp])?;
        let y = edge_mlp(tape, p, cfg, &format!("enc.down{l}"), x)?;
        node = pool(tape, y, k)?;
        levels.push(EncodedLevel { points: points.clone(), features: node });
    }
    for l in (0..levels.len() - 1).rev() {
        let nearest: Arc<[usize]> = nearest_indices(&levels[l].points, &levels[l + 1].points)?.into();
        let coarse = eqlayers::gather_hybrid(tape, levels[l + 1].features, &nearest)?;
        let x = eqlayers::concat_hybrid(tape, &[coarse, levels[l].features])?;
        let prefix = format!("enc.up{l}");
        let y = layer(tape, p, cfg, &format!("{prefix}.fc"), x)?;
        levels[l].features = activate(tape, p, &format!("{prefix}.act"), y)?;
    }
    Ok(Encoding { levels })
}

/// Latent codes `[Q, latent_width]` for a batch of queries.
pub fn aggregate_latent(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    enc: &Encoding,
    queries: &[[f64; 3]],
) -> Result<Var, ModelError> {
    if queries.is_empty() {
        return Err(ModelError::Config("no query points".into()));
    }
    let mut per_level = Vec::with_capacity(enc.levels.len() * 2);
    for (l, level) in enc.levels.iter().enumerate() {
        let (table, k) = knn_table(queries, &level.points, cfg.k)?;
        let owner = |e: usize| &queries[e / k];
        let disp = coordinate_tensor(table.iter().enumerate().map(|(e, &j)| {
            let (a, q) = (level.points[j], owner(e));
            [a[0] - q[0], a[1] - q[1], a[2] - q[2]]
        }));
        let mut geometry = vec![disp];
        if cfg.mode.uses_absolute_coordinates() {
            geometry.push(coordinate_tensor((0..table.len()).map(|e| *owner(e))));
        }
        let neighbors: Arc<[usize]> = table.into();
        let x = edge_input(tape, cfg.mode, level.features, None, &neighbors, geometry)?;
        let y = edge_mlp(tape, p, cfg, &format!("agg{l}"), x)?;
        let y = pool(tape, y, k)?;
        if let Some(v) = y.v {
            per_level.push(eqlayers::invariance(tape, v, cfg.mode.normalized_invariant())?);
        }
        if let Some(h) = y.h {
            per_level.push(h);
        }
    }
    Ok(tape.concat(&per_level)?)
}

/// Residual MLP on `z` (and `p` in plain mode) ending in a sigmoid; `[Q]`.
pub fn decode_occupancy(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    z: Var,
    queries: &[[f64; 3]],
) -> Result<Var, ModelError> {
    let logits = decode_logits(tape, p, cfg, z, queries)?;
    Ok(tape.sigmoid(logits)?)
}

/// The decoder without its final sigmoid.
pub fn decode_logits(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    z: Var,
    queries: &[[f64; 3]],
) -> Result<Var, ModelError> {
    let mut net = eqlayers::linear(tape, p, "dec.fc_z0", z)?;
    if cfg.mode == EquivarianceMode::Plain {
        let q = tape.constant(Tensor::from_points(queries))?;
        let fp = eqlayers::linear(tape, p, "dec.fc_p", q)?;
        net = tape.add(fp, net)?;
    }
    for i in 0..cfg.decoder_blocks {
        if i > 0 {
            let c = eqlayers::linear(tape, p, &format!("dec.fc_z{i}"), z)?;
            net = tape.add(net, c)?;
        }
        let a = tape.relu(net)?;
        let a = eqlayers::linear(tape, p, &format!("dec.block{i}.fc0"), a)?;
        let a = tape.relu(a)?;
        let dx = eqlayers::linear(tape, p, &format!("dec.block{i}.fc1"), a)?;
        net = tape.add(net, dx)?;
    }
    let a = tape.relu(net)?;
    let logits = eqlayers::linear(tape, p, "dec.out", a)?;
    Ok(tape.reshape(logits, vec![queries.len()])?)
}

/// Encodes `cloud` and returns occupancy probabilities `[Q]` on `tape`.
pub fn forward_on_tape(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    cloud: &PointCloud,
    queries: &[[f64; 3]],
) -> Result<Var, ModelError> {
    let enc = encode_points(tape, p, cfg, cloud)?;
    let z = aggregate_latent(tape, p, cfg, &enc, queries)?;
    decode_occupancy(tape, p, cfg, z, queries)
}

/// As [`forward_on_tape`] but returns logits, for use with [`Tape::bce_logits`].
pub fn forward_logits_on_tape(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    cloud: &PointCloud,
    queries: &[[f64; 3]],
) -> Result<Var, ModelError> {
    let enc = encode_points(tape, p, cfg, cloud)?;
    let z = aggregate_latent(tape, p, cfg, &enc, queries)?;
    decode_logits(tape, p, cfg, z, queries)
}

/// Occupancy probabilities for all queries, in query order.
pub fn model_forward(model: &Model, cloud: &PointCloud, queries: &[[f64; 3]]) -> Result<Vec<f64>, ModelError> {
    model_forward_chunked(model, cloud, queries, queries.len().max(1))
}

/// As [`model_forward`], evaluating `chunk` queries at a time in parallel.
/// The result does not depend on `chunk`.
pub fn model_forward_chunked(
    model: &Model,
    cloud: &PointCloud,
    queries: &[[f64; 3]],
    chunk: usize,
) -> Result<Vec<f64>, ModelError> {
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    let encoded = encode_cloud(model, cloud)?;
    forward_encoded(model, &encoded, queries, chunk)
}

/// Runs only the encoder, for repeated queries against one observation.
pub fn encode_cloud(model: &Model, cloud: &PointCloud) -> Result<EncodingValues, ModelError> {
    let mut tape = Tape::without_recording();
    let p = BoundParams::bind(&mut tape, &model.params)?;
    Ok(encode_points(&mut tape, &p, &model.config, cloud)?.values(&tape))
}

/// Occupancy for `queries` given a cached encoding, `chunk` queries per
/// parallel task.
pub fn forward_encoded(
    model: &Model,
    encoded: &EncodingValues,
    queries: &[[f64; 3]],
    chunk: usize,
) -> Result<Vec<f64>, ModelError> {
    let cfg = &model.config;
    let parts = queries
        .par_chunks(chunk.max(1))
        .map(|qs| {
            let mut tape = Tape::without_recording();
            let p = BoundParams::bind(&mut tape, &model.params)?;
            let enc = encoded.load(&mut tape)?;
            let z = aggregate_latent(&mut tape, &p, cfg, &enc, qs)?;
            let out = decode_occupancy(&mut tape, &p, cfg, z, qs)?;
            Ok(tape.value(out).data().to_vec())
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(parts.concat())
}
