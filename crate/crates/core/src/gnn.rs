//! Forward inference of the graph-transformer LSTM regressor and classifier
//! from serialized weights.
//!
//! One transformer operator per LSTM gate aggregates each vertex with its
//! neighbors under softmax attention. Junction (8-wide) and grain (11-wide)
//! feature rows are zero-padded to a common width and tagged with a vertex
//! type flag so a single weight set serves both vertex kinds. Neighbor
//! coordinates enter as minimum-image offsets relative to the receiving
//! vertex (the receiver's own in-plane slots are zero), which makes every
//! output invariant under global translation of the layer.
//!
//! Computation uses 32-bit weights and activations with 64-bit accumulation;
//! neighbor reductions run through an exact accumulator so results are
//! bitwise reproducible under any vertex relabeling.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::geometry::{self, ExactSum};
use crate::graph::GrainGraph;

/// Width of the padded per-vertex feature row: 11 feature slots plus the
/// vertex type flag (0 junction, 1 grain).
pub const PADDED_WIDTH: usize = 12;

pub const WEIGHT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Regressor,
    Classifier,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::Regressor => write!(f, "regressor"),
            ModelKind::Classifier => write!(f, "classifier"),
        }
    }
}

/// Dense row-major f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// y = A x with 64-bit accumulation.
    pub fn matvec(&self, x: &[f32]) -> Vec<f64> {
        debug_assert_eq!(self.cols, x.len());
        self.data
            .chunks_exact(self.cols)
            .map(|row| {
                row.iter()
                    .zip(x)
                    .map(|(w, v)| (*w as f64) * (*v as f64))
                    .sum()
            })
            .collect()
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.rows, self.cols]
    }
}

/// Weights of one transformer operator (one gate): the self map, the
/// neighbor map, the edge-feature projection, and the two attention maps,
/// plus the gate bias.
#[derive(Debug, Clone, PartialEq)]
pub struct GateWeights {
    pub w1: Matrix,
    pub w2: Matrix,
    pub w3: Matrix,
    pub w4: Matrix,
    pub w5: Matrix,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub input: GateWeights,
    pub forget: GateWeights,
    pub cell: GateWeights,
    pub output: GateWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub w: Matrix,
    pub b: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decoders {
    /// Per-junction displacement heads and per-grain area/volume heads.
    Regressor {
        hx: Decoder,
        hy: Decoder,
        hs: Decoder,
        hv: Decoder,
    },
    /// Edge-event head over concatenated endpoint states plus edge length.
    Classifier { hc: Decoder },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightBundle {
    pub kind: ModelKind,
    pub hidden_dim: usize,
    pub layers: Vec<LayerWeights>,
    pub decoders: Decoders,
}

const GATE_NAMES: [&str; 4] = ["gatei", "gatef", "gatec", "gateo"];

impl WeightBundle {
    pub fn input_width(hidden_dim: usize) -> usize {
        PADDED_WIDTH + hidden_dim
    }

    /// Canonical tensor list: name and shape, in serialization order.
    pub fn tensor_layout(
        kind: ModelKind,
        hidden_dim: usize,
        layers: usize,
    ) -> Vec<(String, Vec<usize>)> {
        let u = Self::input_width(hidden_dim);
        let mut out = Vec::new();
        for l in 0..layers {
            for gate in GATE_NAMES {
                for k in [1usize, 2, 4, 5] {
                    out.push((format!("layer{l}.{gate}.W{k}"), vec![hidden_dim, u]));
                }
                out.push((format!("layer{l}.{gate}.W3"), vec![hidden_dim, 1]));
                out.push((format!("layer{l}.{gate}.b"), vec![hidden_dim]));
            }
        }
        match kind {
            ModelKind::Regressor => {
                for head in ["hx", "hy", "hs", "hv"] {
                    out.push((format!("decoder.{head}.W"), vec![1, hidden_dim]));
                    out.push((format!("decoder.{head}.b"), vec![1]));
                }
            }
            ModelKind::Classifier => {
                out.push(("decoder.hc.W".into(), vec![1, 2 * hidden_dim + 1]));
                out.push(("decoder.hc.b".into(), vec![1]));
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        Self::tensor_layout(self.kind, self.hidden_dim, self.layers.len())
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Bundle with every parameter zero.
    pub fn zeros(kind: ModelKind, hidden_dim: usize, layers: usize) -> Self {
        let u = Self::input_width(hidden_dim);
        let gate = || GateWeights {
            w1: Matrix::zeros(hidden_dim, u),
            w2: Matrix::zeros(hidden_dim, u),
            w3: Matrix::zeros(hidden_dim, 1),
            w4: Matrix::zeros(hidden_dim, u),
            w5: Matrix::zeros(hidden_dim, u),
            bias: vec![0.0; hidden_dim],
        };
        let layer = || LayerWeights {
            input: gate(),
            forget: gate(),
            cell: gate(),
            output: gate(),
        };
        let decoders = match kind {
            ModelKind::Regressor => Decoders::Regressor {
                hx: Decoder {
                    w: Matrix::zeros(1, hidden_dim),
                    b: 0.0,
                },
                hy: Decoder {
                    w: Matrix::zeros(1, hidden_dim),
                    b: 0.0,
                },
                hs: Decoder {
                    w: Matrix::zeros(1, hidden_dim),
                    b: 0.0,
                },
                hv: Decoder {
                    w: Matrix::zeros(1, hidden_dim),
                    b: 0.0,
                },
            },
            ModelKind::Classifier => Decoders::Classifier {
                hc: Decoder {
                    w: Matrix::zeros(1, 2 * hidden_dim + 1),
                    b: 0.0,
                },
            },
        };
        WeightBundle {
            kind,
            hidden_dim,
            layers: (0..layers).map(|_| layer()).collect(),
            decoders,
        }
    }

    /// Seeded uniform weights in [-scale, scale]; handy for smoke runs and
    /// invariance tests when no trained checkpoint is at hand.
    pub fn random(
        kind: ModelKind,
        hidden_dim: usize,
        layers: usize,
        seed: u64,
        scale: f32,
    ) -> Self {
        fn fill(m: &mut Matrix, rng: &mut crate::rng::Rng, scale: f32) {
            for v in &mut m.data {
                *v = (rng.uniform() as f32 * 2.0 - 1.0) * scale;
            }
        }
        let mut bundle = Self::zeros(kind, hidden_dim, layers);
        let mut rng = crate::rng::Rng::from_seed(seed);
        for layer in &mut bundle.layers {
            for gate in [
                &mut layer.input,
                &mut layer.forget,
                &mut layer.cell,
                &mut layer.output,
            ] {
                fill(&mut gate.w1, &mut rng, scale);
                fill(&mut gate.w2, &mut rng, scale);
                fill(&mut gate.w3, &mut rng, scale);
                fill(&mut gate.w4, &mut rng, scale);
                fill(&mut gate.w5, &mut rng, scale);
                for b in &mut gate.bias {
                    *b = (rng.uniform() as f32 * 2.0 - 1.0) * scale;
                }
            }
        }
        match &mut bundle.decoders {
            Decoders::Regressor { hx, hy, hs, hv } => {
                for d in [hx, hy, hs, hv] {
                    fill(&mut d.w, &mut rng, scale);
                    d.b = (rng.uniform() as f32 * 2.0 - 1.0) * scale;
                }
            }
            Decoders::Classifier { hc } => {
                fill(&mut hc.w, &mut rng, scale);
                hc.b = (rng.uniform() as f32 * 2.0 - 1.0) * scale;
            }
        }
        bundle
    }

    fn tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (gate, w) in
                GATE_NAMES
                    .iter()
                    .zip([&layer.input, &layer.forget, &layer.cell, &layer.output])
            {
                for (k, m) in [(1, &w.w1), (2, &w.w2), (4, &w.w4), (5, &w.w5)] {
                    out.push((format!("layer{l}.{gate}.W{k}"), m.shape(), m.data.clone()));
                }
                out.push((
                    format!("layer{l}.{gate}.W3"),
                    w.w3.shape(),
                    w.w3.data.clone(),
                ));
                out.push((
                    format!("layer{l}.{gate}.b"),
                    vec![w.bias.len()],
                    w.bias.clone(),
                ));
            }
        }
        let push_decoder =
            |name: &str, d: &Decoder, out: &mut Vec<(String, Vec<usize>, Vec<f32>)>| {
                out.push((format!("decoder.{name}.W"), d.w.shape(), d.w.data.clone()));
                out.push((format!("decoder.{name}.b"), vec![1], vec![d.b]));
            };
        match &self.decoders {
            Decoders::Regressor { hx, hy, hs, hv } => {
                push_decoder("hx", hx, &mut out);
                push_decoder("hy", hy, &mut out);
                push_decoder("hs", hs, &mut out);
                push_decoder("hv", hv, &mut out);
            }
            Decoders::Classifier { hc } => push_decoder("hc", hc, &mut out),
        }
        out
    }
}

// ---------------------------------------------------------------------------
// manifest + blob serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    byte_offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model: ModelKind,
    hidden_dim: usize,
    layers: usize,
    tensors: Vec<TensorRecord>,
}

pub fn save_weights(bundle: &WeightBundle, manifest_path: &Path, blob_path: &Path) -> Result<()> {
    let mut records = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    for (name, shape, data) in bundle.tensors() {
        records.push(TensorRecord {
            name,
            shape,
            dtype: "f32".into(),
            byte_offset: blob.len() as u64,
        });
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: WEIGHT_FORMAT_VERSION,
        model: bundle.kind,
        hidden_dim: bundle.hidden_dim,
        layers: bundle.layers.len(),
        tensors: records,
    };
    std::fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    let mut f = std::fs::File::create(blob_path)?;
    f.write_all(&blob)?;
    Ok(())
}

pub fn load_weights(manifest_path: &Path, blob_path: &Path) -> Result<WeightBundle> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    if manifest.format_version != WEIGHT_FORMAT_VERSION {
        return Err(Error::Load(format!(
            "unsupported weight format version {}",
            manifest.format_version
        )));
    }
    let mut blob = Vec::new();
    std::fs::File::open(blob_path)?.read_to_end(&mut blob)?;

    let expected =
        WeightBundle::tensor_layout(manifest.model, manifest.hidden_dim, manifest.layers);
    let by_name: HashMap<&str, &TensorRecord> = manifest
        .tensors
        .iter()
        .map(|t| (t.name.as_str(), t))
        .collect();
    for t in &manifest.tensors {
        if !expected.iter().any(|(n, _)| n == &t.name) {
            return Err(Error::Load(format!("unknown tensor name {}", t.name)));
        }
        if t.dtype != "f32" {
            return Err(Error::Load(format!(
                "tensor {}: unsupported dtype {}",
                t.name, t.dtype
            )));
        }
    }

    let mut fetch = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
        let record = by_name
            .get(name)
            .ok_or_else(|| Error::Load(format!("missing tensor {name}")))?;
        if record.shape != shape {
            return Err(Error::Shape {
                name: name.into(),
                expected: shape.to_vec(),
                got: record.shape.clone(),
            });
        }
        let count: usize = shape.iter().product();
        let start = record.byte_offset as usize;
        let end = start + 4 * count;
        if end > blob.len() {
            return Err(Error::Load(format!(
                "tensor {name}: blob truncated ({} bytes, need {end})",
                blob.len()
            )));
        }
        Ok(blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect())
    };

    let dh = manifest.hidden_dim;
    let u = WeightBundle::input_width(dh);
    let mut layers = Vec::with_capacity(manifest.layers);
    for l in 0..manifest.layers {
        let mut gates = Vec::with_capacity(4);
        for gate in GATE_NAMES {
            type Fetch<'a> = dyn FnMut(&str, &[usize]) -> Result<Vec<f32>> + 'a;
            let mat = |k: usize, fetch: &mut Fetch| -> Result<Matrix> {
                Ok(Matrix {
                    rows: dh,
                    cols: u,
                    data: fetch(&format!("layer{l}.{gate}.W{k}"), &[dh, u])?,
                })
            };
            let w1 = mat(1, &mut fetch)?;
            let w2 = mat(2, &mut fetch)?;
            let w4 = mat(4, &mut fetch)?;
            let w5 = mat(5, &mut fetch)?;
            let w3 = Matrix {
                rows: dh,
                cols: 1,
                data: fetch(&format!("layer{l}.{gate}.W3"), &[dh, 1])?,
            };
            let bias = fetch(&format!("layer{l}.{gate}.b"), &[dh])?;
            gates.push(GateWeights {
                w1,
                w2,
                w3,
                w4,
                w5,
                bias,
            });
        }
        let output = gates.pop().expect("four gates");
        let cell = gates.pop().expect("four gates");
        let forget = gates.pop().expect("four gates");
        let input = gates.pop().expect("four gates");
        layers.push(LayerWeights {
            input,
            forget,
            cell,
            output,
        });
    }
    let decoders = match manifest.model {
        ModelKind::Regressor => {
            let head = |name: &str| -> Result<Decoder> {
                Ok(Decoder {
                    w: Matrix {
                        rows: 1,
                        cols: dh,
                        data: fetch(&format!("decoder.{name}.W"), &[1, dh])?,
                    },
                    b: fetch(&format!("decoder.{name}.b"), &[1])?[0],
                })
            };
            Decoders::Regressor {
                hx: head("hx")?,
                hy: head("hy")?,
                hs: head("hs")?,
                hv: head("hv")?,
            }
        }
        ModelKind::Classifier => Decoders::Classifier {
            hc: Decoder {
                w: Matrix {
                    rows: 1,
                    cols: 2 * dh + 1,
                    data: fetch("decoder.hc.W", &[1, 2 * dh + 1])?,
                },
                b: fetch("decoder.hc.b", &[1])?[0],
            },
        },
    };
    Ok(WeightBundle {
        kind: manifest.model,
        hidden_dim: dh,
        layers,
        decoders,
    })
}

// ---------------------------------------------------------------------------
// vertex universe
// ---------------------------------------------------------------------------

/// Flattened heterogeneous graph for inference: junctions first (ascending
/// id), then grains (ascending id). Neighbor lists are ordered by kind then
/// id, so inference order is a pure function of graph content.
#[derive(Debug, Clone)]
pub struct VertexGraph {
    /// Padded feature rows, one per vertex.
    pub inputs: Vec<[f64; PADDED_WIDTH]>,
    /// Per vertex: (neighbor index, edge length feature).
    pub neighbors: Vec<Vec<(usize, f64)>>,
    /// In-plane coordinates in reference units, for relative offsets.
    pub coords: Vec<(f64, f64)>,
    pub n_junctions: usize,
    pub n_grains: usize,
}

impl VertexGraph {
    pub fn build(graph: &GrainGraph, features: &FeatureSet) -> Result<Self> {
        let n_j = features.junction_ids.len();
        let n_g = features.grain_ids.len();
        let mut inputs = Vec::with_capacity(n_j + n_g);
        let mut coords = Vec::with_capacity(n_j + n_g);
        for row in &features.junction_features {
            let mut padded = [0.0f64; PADDED_WIDTH];
            padded[..8].copy_from_slice(row);
            inputs.push(padded);
            coords.push((row[0], row[1]));
        }
        for row in &features.grain_features {
            let mut padded = [0.0f64; PADDED_WIDTH];
            padded[..11].copy_from_slice(row);
            padded[11] = 1.0;
            inputs.push(padded);
            coords.push((row[0], row[1]));
        }

        let domain = graph.domain();
        let jg_len = |ji: usize, gi: usize, s: &Self| -> f64 {
            let _ = (ji, gi, s);
            0.0
        };
        let _ = jg_len;

        let mut neighbors: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_j + n_g];
        // Junction-junction edges, including parallel entries.
        for (e, &(a, b)) in features.edges.iter().enumerate() {
            let ia = features.junction_index(a).ok_or(Error::Lookup {
                kind: "junction",
                id: a,
            })?;
            let ib = features.junction_index(b).ok_or(Error::Lookup {
                kind: "junction",
                id: b,
            })?;
            let len = features.edge_lengths[e];
            neighbors[ia].push((ib, len));
            neighbors[ib].push((ia, len));
        }
        // Junction-grain edges from the triplets.
        for (ji, &jid) in features.junction_ids.iter().enumerate() {
            let junction = graph.require_junction(jid)?;
            for g in junction.grain_set() {
                let gi = features.grain_index(g).ok_or(Error::Lookup {
                    kind: "grain",
                    id: g,
                })?;
                let grain = graph.require_grain(g)?;
                let len =
                    geometry::periodic_distance(junction.pos, grain.centroid, domain.lx, domain.ly)
                        / domain.l0x;
                neighbors[ji].push((n_j + gi, len));
                neighbors[n_j + gi].push((ji, len));
            }
        }
        for list in &mut neighbors {
            list.sort_by(|a, b| {
                a.0.cmp(&b.0)
                    .then(a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
            });
        }
        Ok(VertexGraph {
            inputs,
            neighbors,
            coords,
            n_junctions: n_j,
            n_grains: n_g,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Input vector of vertex `i` as seen by vertex `recv`: feature slots
    /// with in-plane coordinates replaced by wrapped relative offsets, then
    /// the hidden state. A vertex sees its own coordinates as zero.
    fn passed_input(&self, i: usize, recv: usize, hidden: &[Vec<f32>], out: &mut Vec<f32>) {
        out.clear();
        let row = &self.inputs[i];
        let (xi, yi) = self.coords[recv];
        let (xk, yk) = self.coords[i];
        let dx = xk - xi;
        let dy = yk - yi;
        out.push((dx - dx.round()) as f32);
        out.push((dy - dy.round()) as f32);
        for v in &row[2..] {
            out.push(*v as f32);
        }
        out.extend_from_slice(&hidden[i]);
    }
}

// ---------------------------------------------------------------------------
// transformer + LSTM forward pass
// ---------------------------------------------------------------------------

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One transformer aggregation: for every vertex, the self map plus the
/// attention-weighted neighbor messages. Returns hidden_dim values per
/// vertex. `attention_out`, when supplied, receives each vertex's attention
/// row (aligned with its neighbor list).
pub fn transformer_aggregate(
    vg: &VertexGraph,
    hidden: &[Vec<f32>],
    gate: &GateWeights,
    mut attention_out: Option<&mut Vec<Vec<f64>>>,
) -> Result<Vec<Vec<f32>>> {
    let dh = gate.bias.len();
    let sqrt_dh = (dh as f64).sqrt();
    let mut out = Vec::with_capacity(vg.len());
    let mut self_vec: Vec<f32> = Vec::new();
    let mut passed: Vec<f32> = Vec::new();

    if let Some(rows) = attention_out.as_deref_mut() {
        rows.clear();
    }

    for i in 0..vg.len() {
        vg.passed_input(i, i, hidden, &mut self_vec);
        let base = gate.w1.matvec(&self_vec);
        let query = gate.w4.matvec(&self_vec);

        let nbrs = &vg.neighbors[i];
        if nbrs.is_empty() {
            if let Some(rows) = attention_out.as_deref_mut() {
                rows.push(Vec::new());
            }
            out.push(base.iter().map(|v| *v as f32).collect());
            continue;
        }

        let mut scores = Vec::with_capacity(nbrs.len());
        let mut messages: Vec<Vec<f64>> = Vec::with_capacity(nbrs.len());
        for &(k, flen) in nbrs {
            vg.passed_input(k, i, hidden, &mut passed);
            let mut keyed = gate.w5.matvec(&passed);
            let mut message = gate.w2.matvec(&passed);
            for r in 0..dh {
                let edge_term = (gate.w3.data[r] as f64) * flen;
                keyed[r] += edge_term;
                message[r] += edge_term;
            }
            let mut score = 0.0f64;
            for r in 0..dh {
                score += query[r] * keyed[r];
            }
            scores.push(score / sqrt_dh);
            messages.push(message);
        }

        // Softmax over neighbors with exact reductions: the result does not
        // depend on neighbor order, so relabeled graphs reproduce bitwise.
        let max_score = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scores.iter().map(|s| (s - max_score).exp()).collect();
        let mut denom = ExactSum::new();
        for w in &weights {
            denom.add(*w);
        }
        let denom = denom.total();

        if let Some(rows) = attention_out.as_deref_mut() {
            rows.push(weights.iter().map(|w| w / denom).collect());
        }

        let mut row_out = Vec::with_capacity(dh);
        let mut acc = ExactSum::new();
        for r in 0..dh {
            acc = ExactSum::new();
            for (k, w) in weights.iter().enumerate() {
                acc.add(w * messages[k][r]);
            }
            row_out.push((base[r] + acc.total() / denom) as f32);
        }
        let _ = acc;
        out.push(row_out);
    }
    Ok(out)
}

/// Hidden and cell state matrices: one row of width `hidden_dim` per vertex.
pub type StatePair = (Vec<Vec<f32>>, Vec<Vec<f32>>);

/// One LSTM layer step: gate activations from four transformer aggregations,
/// then the elementwise state update.
pub fn lstm_step(
    vg: &VertexGraph,
    hidden: &[Vec<f32>],
    cell: &[Vec<f32>],
    layer: &LayerWeights,
) -> Result<StatePair> {
    let dh = layer.input.bias.len();
    let gates = [
        ("input", &layer.input),
        ("forget", &layer.forget),
        ("cell", &layer.cell),
        ("output", &layer.output),
    ];
    let mut activations: Vec<Vec<Vec<f32>>> = Vec::with_capacity(4);
    for (name, gate) in gates {
        let agg = transformer_aggregate(vg, hidden, gate, None)?;
        for row in &agg {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite value in {name} gate")));
            }
        }
        activations.push(agg);
    }
    let (t_i, t_f, t_c, t_o) = (
        &activations[0],
        &activations[1],
        &activations[2],
        &activations[3],
    );

    let n = vg.len();
    let mut new_hidden = Vec::with_capacity(n);
    let mut new_cell = Vec::with_capacity(n);
    for v in 0..n {
        let mut h_row = Vec::with_capacity(dh);
        let mut c_row = Vec::with_capacity(dh);
        for r in 0..dh {
            let i_g = sigmoid(t_i[v][r] as f64 + layer.input.bias[r] as f64);
            let f_g = sigmoid(t_f[v][r] as f64 + layer.forget.bias[r] as f64);
            let cand = (t_c[v][r] as f64 + layer.cell.bias[r] as f64).tanh();
            let o_g = sigmoid(t_o[v][r] as f64 + layer.output.bias[r] as f64);
            let c_new = f_g * cell[v][r] as f64 + i_g * cand;
            let h_new = o_g * c_new.tanh();
            if !c_new.is_finite() || !h_new.is_finite() {
                return Err(Error::Numeric(format!("non-finite state at vertex {v}")));
            }
            c_row.push(c_new as f32);
            h_row.push(h_new as f32);
        }
        new_hidden.push(h_row);
        new_cell.push(c_row);
    }
    Ok((new_hidden, new_cell))
}

/// Run the stacked encoder: states start at zero; each layer consumes the
/// previous layer's states. Returns the final hidden states.
pub fn encode(vg: &VertexGraph, bundle: &WeightBundle) -> Result<Vec<Vec<f32>>> {
    let n = vg.len();
    let dh = bundle.hidden_dim;
    let mut hidden = vec![vec![0.0f32; dh]; n];
    let mut cell = vec![vec![0.0f32; dh]; n];
    for layer in &bundle.layers {
        let (h, c) = lstm_step(vg, &hidden, &cell, layer)?;
        hidden = h;
        cell = c;
    }
    Ok(hidden)
}

#[derive(Debug, Clone)]
pub struct RegressorOutput {
    /// Per junction, aligned with `FeatureSet::junction_ids`.
    pub junction_dx: Vec<f64>,
    pub junction_dy: Vec<f64>,
    /// Per grain, aligned with `FeatureSet::grain_ids`.
    pub grain_ds: Vec<f64>,
    pub grain_v: Vec<f64>,
}

/// Regression heads: bounded displacements and area change, non-negative
/// excess volume.
pub fn regress(
    graph: &GrainGraph,
    features: &FeatureSet,
    bundle: &WeightBundle,
) -> Result<RegressorOutput> {
    let Decoders::Regressor { hx, hy, hs, hv } = &bundle.decoders else {
        return Err(Error::Tag {
            expected: "regressor".into(),
            got: bundle.kind.to_string(),
        });
    };
    let vg = VertexGraph::build(graph, features)?;
    let hidden = encode(&vg, bundle)?;
    let head = |d: &Decoder, h: &[f32]| -> f64 { d.w.matvec(h)[0] + d.b as f64 };
    let n_j = vg.n_junctions;
    let mut out = RegressorOutput {
        junction_dx: Vec::with_capacity(n_j),
        junction_dy: Vec::with_capacity(n_j),
        grain_ds: Vec::with_capacity(vg.n_grains),
        grain_v: Vec::with_capacity(vg.n_grains),
    };
    for h in &hidden[..n_j] {
        out.junction_dx.push(head(hx, h).tanh());
        out.junction_dy.push(head(hy, h).tanh());
    }
    for h in &hidden[n_j..] {
        out.grain_ds.push(head(hs, h).tanh());
        out.grain_v.push(head(hv, h).max(0.0));
    }
    Ok(out)
}

/// Classification head: event probability per junction-junction edge,
/// aligned with `FeatureSet::edges`. Endpoint states concatenate in
/// (lower id, higher id) order, then the edge length.
pub fn classify(
    graph: &GrainGraph,
    features: &FeatureSet,
    bundle: &WeightBundle,
) -> Result<Vec<f64>> {
    let Decoders::Classifier { hc } = &bundle.decoders else {
        return Err(Error::Tag {
            expected: "classifier".into(),
            got: bundle.kind.to_string(),
        });
    };
    let vg = VertexGraph::build(graph, features)?;
    let hidden = encode(&vg, bundle)?;
    let dh = bundle.hidden_dim;
    let mut probs = Vec::with_capacity(features.edges.len());
    let mut concat: Vec<f32> = Vec::with_capacity(2 * dh + 1);
    for (e, &(a, b)) in features.edges.iter().enumerate() {
        let ia = features.junction_index(a).ok_or(Error::Lookup {
            kind: "junction",
            id: a,
        })?;
        let ib = features.junction_index(b).ok_or(Error::Lookup {
            kind: "junction",
            id: b,
        })?;
        concat.clear();
        concat.extend_from_slice(&hidden[ia]);
        concat.extend_from_slice(&hidden[ib]);
        concat.push(features.edge_lengths[e] as f32);
        let logit = hc.w.matvec(&concat)[0] + hc.b as f64;
        probs.push(sigmoid(logit));
    }
    Ok(probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::DomainSpec;
    use crate::features::normalize_features;
    use crate::rng::Rng;
    use crate::substrate;

    fn domain_40() -> DomainSpec {
        DomainSpec::new(40.0, 40.0, 50.0, 10.0, 2.0, 10.0, 2.0)
    }

    fn small_graph(seed: u64, n: usize) -> GrainGraph {
        let mut rng = Rng::from_seed(seed);
        let seeds = substrate::uniform_seeds(n, &mut rng).unwrap();
        let orientations = substrate::sample_orientations(n, &mut rng);
        substrate::periodic_voronoi(&seeds, &orientations, &domain_40()).unwrap()
    }

    #[test]
    fn relative_offsets_wrap_and_zero_self() {
        let graph = small_graph(1, 12);
        let features = normalize_features(&graph).unwrap();
        let vg = VertexGraph::build(&graph, &features).unwrap();
        let hidden = vec![vec![0.0f32; 4]; vg.len()];
        let mut buf = Vec::new();
        vg.passed_input(0, 0, &hidden, &mut buf);
        assert_eq!(buf[0], 0.0);
        assert_eq!(buf[1], 0.0);
        // A neighbor across the wrap comes out in [-0.5, 0.5).
        for i in 0..vg.len() {
            for &(k, _) in &vg.neighbors[i] {
                vg.passed_input(k, i, &hidden, &mut buf);
                assert!(buf[0].abs() <= 0.5 + 1e-6);
                assert!(buf[1].abs() <= 0.5 + 1e-6);
            }
        }
    }

    #[test]
    fn zero_weights_aggregate_to_zero() {
        let graph = small_graph(2, 10);
        let features = normalize_features(&graph).unwrap();
        let vg = VertexGraph::build(&graph, &features).unwrap();
        let bundle = WeightBundle::zeros(ModelKind::Regressor, 8, 1);
        let hidden = vec![vec![0.0f32; 8]; vg.len()];
        let out = transformer_aggregate(&vg, &hidden, &bundle.layers[0].input, None).unwrap();
        assert!(out.iter().all(|row| row.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let graph = small_graph(3, 15);
        let features = normalize_features(&graph).unwrap();
        let vg = VertexGraph::build(&graph, &features).unwrap();
        let bundle = WeightBundle::random(ModelKind::Regressor, 16, 1, 9, 0.5);
        let hidden = vec![vec![0.1f32; 16]; vg.len()];
        let mut rows = Vec::new();
        transformer_aggregate(&vg, &hidden, &bundle.layers[0].cell, Some(&mut rows)).unwrap();
        for row in rows {
            if row.is_empty() {
                continue;
            }
            let total: f64 = row.iter().sum();
            assert!((total - 1.0).abs() < 1e-9, "attention sum {total}");
            assert!(row.iter().all(|&b| (0.0..=1.0).contains(&b)));
        }
    }

    #[test]
    fn zero_weight_lstm_has_the_closed_form() {
        let graph = small_graph(4, 10);
        let features = normalize_features(&graph).unwrap();
        let vg = VertexGraph::build(&graph, &features).unwrap();
        let bundle = WeightBundle::zeros(ModelKind::Regressor, 6, 1);
        let hidden = vec![vec![0.25f32; 6]; vg.len()];
        let cell = vec![vec![0.5f32; 6]; vg.len()];
        let (h, c) = lstm_step(&vg, &hidden, &cell, &bundle.layers[0]).unwrap();
        // i = f = o = 0.5, candidate = 0: C' = 0.5 C, H' = 0.5 tanh(C').
        for v in 0..vg.len() {
            for r in 0..6 {
                assert!((c[v][r] - 0.25).abs() < 1e-7);
                let expect = 0.5 * 0.25f64.tanh();
                assert!((h[v][r] as f64 - expect).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn saturated_forget_gate_carries_the_cell_state() {
        let graph = small_graph(5, 10);
        let features = normalize_features(&graph).unwrap();
        let vg = VertexGraph::build(&graph, &features).unwrap();
        let mut bundle = WeightBundle::zeros(ModelKind::Regressor, 4, 1);
        for b in &mut bundle.layers[0].forget.bias {
            *b = 50.0;
        }
        let hidden = vec![vec![0.0f32; 4]; vg.len()];
        let cell = vec![vec![0.75f32; 4]; vg.len()];
        let (_, c) = lstm_step(&vg, &hidden, &cell, &bundle.layers[0]).unwrap();
        // f ~= 1 and candidate = 0: the cell state survives unchanged.
        for row in &c {
            for &v in row {
                assert!((v - 0.75).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn repeated_steps_are_bitwise_reproducible() {
        let graph = small_graph(6, 8);
        let features = normalize_features(&graph).unwrap();
        let bundle = WeightBundle::random(ModelKind::Regressor, 12, 2, 33, 0.4);
        let a = regress(&graph, &features, &bundle).unwrap();
        let b = regress(&graph, &features, &bundle).unwrap();
        assert_eq!(a.junction_dx, b.junction_dx);
        assert_eq!(a.grain_ds, b.grain_ds);
        assert_eq!(a.grain_v, b.grain_v);
    }

    #[test]
    fn decoder_closed_forms_hold() {
        let graph = small_graph(7, 10);
        let features = normalize_features(&graph).unwrap();
        // Zero decoder weights with biases: dx = tanh(b_x) everywhere,
        // negative v head clamps to zero.
        let mut bundle = WeightBundle::zeros(ModelKind::Regressor, 8, 1);
        if let Decoders::Regressor { hx, hv, .. } = &mut bundle.decoders {
            hx.b = 0.7;
            hv.b = -0.3;
        }
        let out = regress(&graph, &features, &bundle).unwrap();
        for dx in out.junction_dx {
            assert!((dx - (0.7f32 as f64).tanh()).abs() < 1e-12);
        }
        assert!(out.grain_v.iter().all(|&v| v == 0.0));
        for ds in out.grain_ds {
            assert!((-1.0..=1.0).contains(&ds));
        }
    }

    #[test]
    fn zero_classifier_outputs_half_and_bias_is_monotone() {
        let graph = small_graph(8, 10);
        let features = normalize_features(&graph).unwrap();
        let mut bundle = WeightBundle::zeros(ModelKind::Classifier, 8, 1);
        let p0 = classify(&graph, &features, &bundle).unwrap();
        assert!(p0.iter().all(|&p| (p - 0.5).abs() < 1e-12));
        if let Decoders::Classifier { hc } = &mut bundle.decoders {
            hc.b = 0.8;
        }
        let p1 = classify(&graph, &features, &bundle).unwrap();
        for (a, b) in p0.iter().zip(&p1) {
            assert!((sigmoid(sigmoid_inv(*a) + 0.8f32 as f64) - b).abs() < 1e-9);
            assert!(b > a);
        }
    }

    fn sigmoid_inv(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn model_tags_are_enforced() {
        let graph = small_graph(9, 10);
        let features = normalize_features(&graph).unwrap();
        let classifier = WeightBundle::zeros(ModelKind::Classifier, 8, 1);
        assert!(matches!(
            regress(&graph, &features, &classifier),
            Err(Error::Tag { .. })
        ));
        let regressor = WeightBundle::zeros(ModelKind::Regressor, 8, 1);
        assert!(matches!(
            classify(&graph, &features, &regressor),
            Err(Error::Tag { .. })
        ));
    }

    #[test]
    fn translation_leaves_outputs_unchanged() {
        let mut graph = small_graph(10, 14);
        let features = normalize_features(&graph).unwrap();
        let regressor = WeightBundle::random(ModelKind::Regressor, 16, 2, 5, 0.4);
        let classifier = WeightBundle::random(ModelKind::Classifier, 16, 2, 6, 0.4);
        let before = regress(&graph, &features, &regressor).unwrap();
        let p_before = classify(&graph, &features, &classifier).unwrap();

        graph.translate(0.37, 0.11);
        let features2 = normalize_features(&graph).unwrap();
        let after = regress(&graph, &features2, &regressor).unwrap();
        let p_after = classify(&graph, &features2, &classifier).unwrap();

        for (a, b) in before.junction_dx.iter().zip(&after.junction_dx) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in before.grain_ds.iter().zip(&after.grain_ds) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in p_before.iter().zip(&p_after) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn hex_lattice_probabilities_collapse_to_congruence_classes() {
        // On the unperturbed lattice with identical orientations, edges are
        // congruent up to lattice symmetry. The encoder is exactly
        // translation invariant (not rotation invariant), so probabilities
        // collapse onto one value per edge-orientation class instead of
        // varying edge by edge.
        let mut rng = Rng::from_seed(11);
        let domain = domain_40();
        let seeds = substrate::hex_perturbed_seeds(&domain, 8.0, 0.0, &mut rng).unwrap();
        let orientations = vec![[0.0, 0.0, 1.0]; seeds.len()];
        let graph = substrate::periodic_voronoi(&seeds, &orientations, &domain).unwrap();
        let features = normalize_features(&graph).unwrap();
        let bundle = WeightBundle::random(ModelKind::Classifier, 12, 2, 21, 0.4);
        let probs = classify(&graph, &features, &bundle).unwrap();
        let mut classes: Vec<f64> = Vec::new();
        for &p in &probs {
            if !classes.iter().any(|c| (c - p).abs() < 1e-9) {
                classes.push(p);
            }
        }
        // Three edge orientations times at most two endpoint orderings.
        assert!(classes.len() <= 6, "classes: {classes:?}");
        assert!(classes.len() * 4 <= probs.len(), "no symmetry collapse");
    }

    #[test]
    fn weights_round_trip_byte_identical() {
        let bundle = WeightBundle::random(ModelKind::Regressor, 8, 2, 77, 0.3);
        let dir = std::env::temp_dir().join("polygrain_weights_test");
        std::fs::create_dir_all(&dir).unwrap();
        let m1 = dir.join("a.manifest.json");
        let b1 = dir.join("a.blob");
        save_weights(&bundle, &m1, &b1).unwrap();
        let loaded = load_weights(&m1, &b1).unwrap();
        assert_eq!(bundle, loaded);
        let m2 = dir.join("b.manifest.json");
        let b2 = dir.join("b.blob");
        save_weights(&loaded, &m2, &b2).unwrap();
        assert_eq!(std::fs::read(&m1).unwrap(), std::fs::read(&m2).unwrap());
        assert_eq!(std::fs::read(&b1).unwrap(), std::fs::read(&b2).unwrap());
    }

    #[test]
    fn truncated_blob_is_a_load_error() {
        let bundle = WeightBundle::zeros(ModelKind::Classifier, 8, 1);
        let dir = std::env::temp_dir().join("polygrain_weights_trunc");
        std::fs::create_dir_all(&dir).unwrap();
        let m = dir.join("m.json");
        let b = dir.join("w.blob");
        save_weights(&bundle, &m, &b).unwrap();
        let bytes = std::fs::read(&b).unwrap();
        std::fs::write(&b, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_weights(&m, &b), Err(Error::Load(_))));
    }

    #[test]
    fn default_architecture_parameter_count_is_pinned() {
        // Two layers at hidden width 96 over 12-wide padded inputs:
        // per gate 4*(96*108) + 96 + 96, four gates per layer, plus four
        // scalar regression heads.
        let bundle = WeightBundle::zeros(ModelKind::Regressor, 96, 2);
        assert_eq!(bundle.parameter_count(), 333_700);
        let classifier = WeightBundle::zeros(ModelKind::Classifier, 96, 2);
        assert_eq!(classifier.parameter_count(), 333_506);
    }
}
