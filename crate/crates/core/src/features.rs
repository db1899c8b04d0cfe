//! Normalized per-vertex and per-edge feature vectors.
//!
//! Junction vector (width 8): `[x, y, z, G, R, dx, dy, dz]`, divided
//! elementwise by `[l0x, l0y, l0z, g_max, r_max, l0x, l0y, l0z]`.
//!
//! Grain vector (width 11):
//! `[x, y, z, s, v, cos θx, sin θx, cos θz, sin θz, ds, dz]`, divided by
//! `[l0x, l0y, l0z, l0x*l0y, l0x*l0y*l0z, 1, 1, 1, 1, l0x*l0y, l0z]`.
//!
//! The divisors are the reference-domain constants, so coordinates on wider
//! domains exceed 1 by design. Layer heights above the reference height clamp
//! to 1. The only edge feature is the periodic length over `l0x`.

use crate::domain::DomainSpec;
use crate::error::Result;
use crate::graph::{GrainGraph, GrainId, JunctionId};

pub const JUNCTION_FEATURE_WIDTH: usize = 8;
pub const GRAIN_FEATURE_WIDTH: usize = 11;

/// Feature snapshot of one layer. Vertex rows follow ascending id order;
/// edges follow the graph's sorted edge order. Junction-grain edges carry a
/// length feature too, stored separately from the junction-junction ones.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub junction_ids: Vec<JunctionId>,
    pub grain_ids: Vec<GrainId>,
    pub junction_features: Vec<[f64; JUNCTION_FEATURE_WIDTH]>,
    pub grain_features: Vec<[f64; GRAIN_FEATURE_WIDTH]>,
    /// Junction-junction edges, `(a, b)` with `a < b`, ascending.
    pub edges: Vec<(JunctionId, JunctionId)>,
    /// Periodic edge length / l0x per entry of `edges`.
    pub edge_lengths: Vec<f64>,
}

impl FeatureSet {
    pub fn junction_index(&self, id: JunctionId) -> Option<usize> {
        self.junction_ids.binary_search(&id).ok()
    }

    pub fn grain_index(&self, id: GrainId) -> Option<usize> {
        self.grain_ids.binary_search(&id).ok()
    }

    pub fn edge_index(&self, a: JunctionId, b: JunctionId) -> Option<usize> {
        let key = (a.min(b), a.max(b));
        self.edges.binary_search(&key).ok()
    }
}

/// Assemble the normalized features of a layer.
pub fn normalize_features(graph: &GrainGraph) -> Result<FeatureSet> {
    let domain = graph.domain();
    domain.check()?;

    let sx = domain.scale_x();
    let sy = domain.scale_y();
    let z = (graph.z_layer().min(domain.l0z)) / domain.l0z;
    let dz = graph.dz_prev() / domain.l0z;
    let g_norm = domain.g_z / domain.g_max;
    let r_norm = domain.r_z / domain.r_max;

    let junction_ids: Vec<JunctionId> = graph.junction_ids().collect();
    let grain_ids: Vec<GrainId> = graph.grain_ids().collect();

    let junction_features = junction_ids
        .iter()
        .map(|&id| {
            let j = graph.junction(id).expect("id from graph");
            [
                j.pos.x * sx,
                j.pos.y * sy,
                z,
                g_norm,
                r_norm,
                j.delta_pos.x * sx,
                j.delta_pos.y * sy,
                dz,
            ]
        })
        .collect();

    let grain_features = grain_ids
        .iter()
        .map(|&id| {
            let g = graph.grain(id).expect("id from graph");
            [
                g.centroid.x * sx,
                g.centroid.y * sy,
                z,
                g.area,
                g.excess_volume,
                g.theta_x.cos(),
                g.theta_x.sin(),
                g.theta_z.cos(),
                g.theta_z.sin(),
                g.delta_area,
                dz,
            ]
        })
        .collect();

    let edges: Vec<(JunctionId, JunctionId)> = graph.edges().collect();
    let edge_lengths = edges
        .iter()
        .map(|&(a, b)| graph.edge_length_phys(a, b).expect("edge from graph") / domain.l0x)
        .collect();

    Ok(FeatureSet {
        junction_ids,
        grain_ids,
        junction_features,
        grain_features,
        edges,
        edge_lengths,
    })
}

/// Feature rows mapped back to physical units: micrometers for lengths and
/// areas (μm²) and volumes (μm³); angles stay as cos/sin pairs.
#[derive(Debug, Clone)]
pub struct PhysicalFeatures {
    pub junction: Vec<[f64; JUNCTION_FEATURE_WIDTH]>,
    pub grain: Vec<[f64; GRAIN_FEATURE_WIDTH]>,
}

pub fn denormalize_features(fs: &FeatureSet, domain: &DomainSpec) -> Result<PhysicalFeatures> {
    domain.check()?;
    let jf = [
        domain.l0x,
        domain.l0y,
        domain.l0z,
        domain.g_max,
        domain.r_max,
        domain.l0x,
        domain.l0y,
        domain.l0z,
    ];
    let a0 = domain.l0x * domain.l0y;
    let v0 = a0 * domain.l0z;
    let gf = [
        domain.l0x, domain.l0y, domain.l0z, a0, v0, 1.0, 1.0, 1.0, 1.0, a0, domain.l0z,
    ];
    let junction = fs
        .junction_features
        .iter()
        .map(|row| std::array::from_fn(|i| row[i] * jf[i]))
        .collect();
    let grain = fs
        .grain_features
        .iter()
        .map(|row| std::array::from_fn(|i| row[i] * gf[i]))
        .collect();
    Ok(PhysicalFeatures { junction, grain })
}

/// Relative coordinate under periodic wrap: the raw difference minus its
/// nearest integer. With reference-normalized coordinates the wrap period is
/// an integer number of reference lengths, so this recovers the
/// minimum-image separation for any neighbor pair.
pub fn relative_coordinate(x_k: f64, x_i: f64) -> f64 {
    let d = x_k - x_i;
    d - d.round()
}
