//! Grain-structure graph engine for layerwise solidification microstructures.
//!
//! A solidified layer is represented as a heterogeneous planar graph on a
//! periodic rectangle: grain vertices, triple-junction vertices,
//! junction-junction edges (grain boundaries) and junction-grain edges. The
//! crate covers the full pipeline:
//!
//! * [`substrate`] — seed sampling and periodic Voronoi tessellation of the
//!   initial layer,
//! * [`graph`] / [`features`] — the graph type, its invariants, and the
//!   normalized per-vertex feature vectors,
//! * [`raster`] — conversion between grain-index images and graphs, plus 3D
//!   stacking of reconstructed layers,
//! * [`topology`] — neighbor-switch and grain-removal edit operations, layer
//!   pair matching, and the layer-spacing policy,
//! * [`gnn`] — forward inference of the graph-transformer LSTM regressor and
//!   classifier from serialized weights,
//! * [`engine`] — the graph-to-graph update algorithm and trajectory rollout,
//! * [`metrics`] — quantities of interest and evaluation metrics.

pub mod domain;
pub mod engine;
pub mod error;
pub mod features;
pub mod geometry;
pub mod gnn;
pub mod graph;
pub mod metrics;
pub mod raster;
pub mod rng;
pub mod substrate;
pub mod topology;

pub use domain::DomainSpec;
pub use error::{Error, Result};
pub use features::{FeatureSet, GRAIN_FEATURE_WIDTH, JUNCTION_FEATURE_WIDTH};
pub use geometry::Vec2;
pub use graph::{
    GrainGraph, GrainId, GrainVertex, JunctionId, JunctionVertex, NeighborSet, ValidationReport,
    VertexId, Violation,
};
pub use raster::{IndexImage, IndexVolume};
