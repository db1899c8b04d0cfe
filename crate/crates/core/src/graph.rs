//! The heterogeneous grain graph and its structural invariants.
//!
//! Junction vertices carry a triplet of adjacent grain ids; junction-grain
//! edges are implied by the triplets and never stored. Junction-junction
//! edges are kept both as an adjacency table (for O(1) edits) and exposed as
//! a sorted edge iterator (for deterministic downstream order). Grain ids are
//! stable across a whole trajectory; junction ids are allocated monotonically
//! and never reused.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::domain::DomainSpec;
use crate::error::{Error, Result};
use crate::geometry::{self, Vec2};

pub type GrainId = u32;
pub type JunctionId = u32;

pub const ORIENTATION_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct GrainVertex {
    pub id: GrainId,
    /// Unit vector of the preferred growth direction.
    pub orientation: [f64; 3],
    /// Angle between the x-axis and the in-plane projection of `orientation`.
    pub theta_x: f64,
    /// Angle between the z-axis and `orientation`.
    pub theta_z: f64,
    /// Cached periodic mean of the junction ring, wrapped to [0,1)^2.
    pub centroid: Vec2,
    /// Cross-sectional area in reference units (physical / (l0x*l0y)).
    pub area: f64,
    /// Excess volume above the interface, physical / (l0x*l0y*l0z).
    pub excess_volume: f64,
    /// Area change realized over the last layer step, reference units.
    pub delta_area: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JunctionVertex {
    pub id: JunctionId,
    /// Wrapped to [0,1)^2 in current-domain units.
    pub pos: Vec2,
    /// Displacement since the previous layer, current-domain units.
    pub delta_pos: Vec2,
    /// Sorted ids of the three adjacent grains. Repeats only occur on
    /// degenerate few-grain tori where a cell borders itself.
    pub triplet: [GrainId; 3],
}

impl JunctionVertex {
    /// Distinct grain ids of the triplet.
    pub fn grain_set(&self) -> Vec<GrainId> {
        let mut v = self.triplet.to_vec();
        v.dedup();
        v
    }
}

/// Derive `(theta_x, theta_z)` from a unit orientation vector.
pub fn orientation_angles(d: [f64; 3]) -> (f64, f64) {
    let theta_z = d[2].clamp(-1.0, 1.0).acos();
    let theta_x = if d[0] == 0.0 && d[1] == 0.0 {
        0.0
    } else {
        d[1].atan2(d[0])
    };
    (theta_x, theta_z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VertexId {
    Grain(GrainId),
    Junction(JunctionId),
}

/// Neighborhood of a vertex: a junction sees its triplet grains and three
/// junctions; a grain sees its junction ring.
#[derive(Debug, Clone, PartialEq)]
pub enum NeighborSet {
    Junction {
        grains: Vec<GrainId>,
        junctions: Vec<JunctionId>,
    },
    Grain {
        junctions: Vec<JunctionId>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    JunctionDegree {
        junction: JunctionId,
        degree: usize,
    },
    UnknownTripletGrain {
        junction: JunctionId,
        grain: GrainId,
    },
    RepeatedTriplet {
        junction: JunctionId,
    },
    EdgeSharedGrains {
        a: JunctionId,
        b: JunctionId,
        shared: usize,
    },
    DuplicateEdge {
        a: JunctionId,
        b: JunctionId,
    },
    EulerCounts {
        grains: usize,
        junctions: usize,
        jj_edges: usize,
    },
    CoordinateRange {
        junction: JunctionId,
    },
    OrientationNorm {
        grain: GrainId,
    },
    NegativeArea {
        grain: GrainId,
    },
    NegativeExcessVolume {
        grain: GrainId,
    },
    StaleCentroid {
        grain: GrainId,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::JunctionDegree { junction, degree } => {
                write!(
                    f,
                    "junction {junction} has {degree} junction edges, expected 3"
                )
            }
            Violation::UnknownTripletGrain { junction, grain } => {
                write!(f, "junction {junction} references unknown grain {grain}")
            }
            Violation::RepeatedTriplet { junction } => {
                write!(f, "junction {junction} triplet has repeated grain ids")
            }
            Violation::EdgeSharedGrains { a, b, shared } => {
                write!(
                    f,
                    "edge ({a}, {b}) endpoints share {shared} grains, expected 2"
                )
            }
            Violation::DuplicateEdge { a, b } => {
                write!(f, "edge ({a}, {b}) appears more than once")
            }
            Violation::EulerCounts {
                grains,
                junctions,
                jj_edges,
            } => write!(
                f,
                "counts off: n_g={grains}, n_j={junctions} (want {}), |e_jj|={jj_edges} (want {})",
                2 * grains,
                3 * grains
            ),
            Violation::CoordinateRange { junction } => {
                write!(f, "junction {junction} position outside [0,1)")
            }
            Violation::OrientationNorm { grain } => {
                write!(f, "grain {grain} orientation is not unit norm")
            }
            Violation::NegativeArea { grain } => write!(f, "grain {grain} has negative area"),
            Violation::NegativeExcessVolume { grain } => {
                write!(f, "grain {grain} has negative excess volume")
            }
            Violation::StaleCentroid { grain } => {
                write!(f, "grain {grain} centroid disagrees with its junction ring")
            }
        }
    }
}

/// Outcome of [`GrainGraph::validate`]. `violations` empty means valid;
/// `sub_minimal` flags graphs with fewer than three grains, which the type
/// accepts but the evolution engine refuses.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub sub_minimal: bool,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct GrainGraph {
    domain: DomainSpec,
    /// Height of this layer's interface, micrometers.
    z_layer: f64,
    /// Height increment realized by the previous update; 0 on the first layer.
    dz_prev: f64,
    grains: BTreeMap<GrainId, GrainVertex>,
    junctions: BTreeMap<JunctionId, JunctionVertex>,
    /// Junction adjacency; each list sorted ascending. A neighbor may appear
    /// twice: parallel boundary edges are real topology on few-grain tori
    /// (a cell bordering the same cell along two arcs) and occur transiently
    /// around two-sided grains during edits.
    adjacency: BTreeMap<JunctionId, Vec<JunctionId>>,
    /// Junctions whose triplet contains the grain; sorted ascending.
    grain_junctions: BTreeMap<GrainId, Vec<JunctionId>>,
    next_junction_id: JunctionId,
}

impl GrainGraph {
    pub fn new(domain: DomainSpec) -> Self {
        GrainGraph {
            domain,
            z_layer: 0.0,
            dz_prev: 0.0,
            grains: BTreeMap::new(),
            junctions: BTreeMap::new(),
            adjacency: BTreeMap::new(),
            grain_junctions: BTreeMap::new(),
            next_junction_id: 0,
        }
    }

    pub fn domain(&self) -> &DomainSpec {
        &self.domain
    }

    pub fn domain_mut(&mut self) -> &mut DomainSpec {
        &mut self.domain
    }

    pub fn z_layer(&self) -> f64 {
        self.z_layer
    }

    pub fn set_z_layer(&mut self, z: f64) {
        self.z_layer = z;
    }

    pub fn dz_prev(&self) -> f64 {
        self.dz_prev
    }

    pub fn set_dz_prev(&mut self, dz: f64) {
        self.dz_prev = dz;
    }

    pub fn grain_count(&self) -> usize {
        self.grains.len()
    }

    pub fn junction_count(&self) -> usize {
        self.junctions.len()
    }

    pub fn jj_edge_count(&self) -> usize {
        self.adjacency.values().map(Vec::len).sum::<usize>() / 2
    }

    /// Junction-grain incidences; every junction carries exactly three slots.
    pub fn jg_edge_count(&self) -> usize {
        3 * self.junctions.len()
    }

    pub fn grains(&self) -> impl Iterator<Item = &GrainVertex> {
        self.grains.values()
    }

    pub fn junctions(&self) -> impl Iterator<Item = &JunctionVertex> {
        self.junctions.values()
    }

    pub fn grain_ids(&self) -> impl Iterator<Item = GrainId> + '_ {
        self.grains.keys().copied()
    }

    pub fn junction_ids(&self) -> impl Iterator<Item = JunctionId> + '_ {
        self.junctions.keys().copied()
    }

    pub fn grain(&self, id: GrainId) -> Option<&GrainVertex> {
        self.grains.get(&id)
    }

    pub fn grain_mut(&mut self, id: GrainId) -> Option<&mut GrainVertex> {
        self.grains.get_mut(&id)
    }

    pub fn junction(&self, id: JunctionId) -> Option<&JunctionVertex> {
        self.junctions.get(&id)
    }

    pub fn junction_mut(&mut self, id: JunctionId) -> Option<&mut JunctionVertex> {
        self.junctions.get_mut(&id)
    }

    pub fn require_grain(&self, id: GrainId) -> Result<&GrainVertex> {
        self.grains
            .get(&id)
            .ok_or(Error::Lookup { kind: "grain", id })
    }

    pub fn require_junction(&self, id: JunctionId) -> Result<&JunctionVertex> {
        self.junctions.get(&id).ok_or(Error::Lookup {
            kind: "junction",
            id,
        })
    }

    /// Sorted junction-junction edges `(a, b)` with `a < b`. Parallel edges
    /// yield consecutive identical pairs.
    pub fn edges(&self) -> impl Iterator<Item = (JunctionId, JunctionId)> + '_ {
        self.adjacency.iter().flat_map(|(&a, nbrs)| {
            nbrs.iter()
                .copied()
                .filter(move |&b| b > a)
                .map(move |b| (a, b))
        })
    }

    pub fn has_edge(&self, a: JunctionId, b: JunctionId) -> bool {
        self.edge_multiplicity(a, b) > 0
    }

    pub fn edge_multiplicity(&self, a: JunctionId, b: JunctionId) -> usize {
        self.adjacency
            .get(&a)
            .map(|n| n.iter().filter(|&&x| x == b).count())
            .unwrap_or(0)
    }

    pub fn add_grain(
        &mut self,
        id: GrainId,
        orientation: [f64; 3],
        area: f64,
        excess_volume: f64,
        delta_area: f64,
    ) -> Result<()> {
        let norm = (orientation[0] * orientation[0]
            + orientation[1] * orientation[1]
            + orientation[2] * orientation[2])
            .sqrt();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::input(format!(
                "grain {id} orientation has no direction"
            )));
        }
        let d = [
            orientation[0] / norm,
            orientation[1] / norm,
            orientation[2] / norm,
        ];
        self.add_grain_unit(id, d, area, excess_volume, delta_area)
    }

    /// Insert a grain whose orientation is already unit norm; values pass
    /// through bit-exact (deserialization must be a fixed point).
    pub(crate) fn add_grain_unit(
        &mut self,
        id: GrainId,
        d: [f64; 3],
        area: f64,
        excess_volume: f64,
        delta_area: f64,
    ) -> Result<()> {
        if id == 0 {
            return Err(Error::input("grain ids are 1-based"));
        }
        if self.grains.contains_key(&id) {
            return Err(Error::input(format!("duplicate grain id {id}")));
        }
        let (theta_x, theta_z) = orientation_angles(d);
        self.grains.insert(
            id,
            GrainVertex {
                id,
                orientation: d,
                theta_x,
                theta_z,
                centroid: Vec2::ZERO,
                area,
                excess_volume,
                delta_area,
            },
        );
        self.grain_junctions.entry(id).or_default();
        Ok(())
    }

    pub fn add_junction(
        &mut self,
        pos: Vec2,
        delta_pos: Vec2,
        triplet: [GrainId; 3],
    ) -> Result<JunctionId> {
        let id = self.next_junction_id;
        self.add_junction_with_id(id, pos, delta_pos, triplet)?;
        Ok(id)
    }

    pub fn add_junction_with_id(
        &mut self,
        id: JunctionId,
        pos: Vec2,
        delta_pos: Vec2,
        mut triplet: [GrainId; 3],
    ) -> Result<()> {
        if self.junctions.contains_key(&id) {
            return Err(Error::input(format!("duplicate junction id {id}")));
        }
        triplet.sort_unstable();
        for g in dedup_triplet(&triplet) {
            if !self.grains.contains_key(&g) {
                return Err(Error::Lookup {
                    kind: "grain",
                    id: g,
                });
            }
        }
        self.junctions.insert(
            id,
            JunctionVertex {
                id,
                pos: pos.wrapped(),
                delta_pos,
                triplet,
            },
        );
        self.adjacency.entry(id).or_default();
        for g in dedup_triplet(&triplet) {
            let ring = self.grain_junctions.entry(g).or_default();
            if let Err(at) = ring.binary_search(&id) {
                ring.insert(at, id);
            }
        }
        self.next_junction_id = self.next_junction_id.max(id + 1);
        Ok(())
    }

    /// Insert a new boundary edge; an existing parallel entry is an error.
    /// Builders (tessellation, extraction, deserialization of generic-scale
    /// graphs) produce each pair at most once; topology edits that
    /// legitimately need a parallel entry use [`GrainGraph::insert_edge_entry`].
    pub fn add_edge(&mut self, a: JunctionId, b: JunctionId) -> Result<()> {
        if self.has_edge(a, b) {
            return Err(Error::input(format!("duplicate edge ({a}, {b})")));
        }
        self.insert_edge_entry(a, b)
    }

    /// Insert one edge entry, allowing parallels.
    pub fn insert_edge_entry(&mut self, a: JunctionId, b: JunctionId) -> Result<()> {
        if a == b {
            return Err(Error::input(format!("self edge at junction {a}")));
        }
        self.require_junction(a)?;
        self.require_junction(b)?;
        let na = self.adjacency.get_mut(&a).expect("adjacency exists");
        let at = na.binary_search(&b).unwrap_or_else(|e| e);
        na.insert(at, b);
        let nb = self.adjacency.get_mut(&b).expect("adjacency exists");
        let at = nb.binary_search(&a).unwrap_or_else(|e| e);
        nb.insert(at, a);
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn remove_edge(&mut self, a: JunctionId, b: JunctionId) -> bool {
        let mut removed = false;
        if let Some(na) = self.adjacency.get_mut(&a) {
            if let Ok(at) = na.binary_search(&b) {
                na.remove(at);
                removed = true;
            }
        }
        if let Some(nb) = self.adjacency.get_mut(&b) {
            if let Ok(at) = nb.binary_search(&a) {
                nb.remove(at);
            }
        }
        removed
    }

    /// Remove a junction together with its incident edges and ring entries.
    pub(crate) fn remove_junction(&mut self, id: JunctionId) -> Result<JunctionVertex> {
        let vertex = self.junctions.remove(&id).ok_or(Error::Lookup {
            kind: "junction",
            id,
        })?;
        if let Some(nbrs) = self.adjacency.remove(&id) {
            for n in nbrs {
                if let Some(list) = self.adjacency.get_mut(&n) {
                    if let Ok(at) = list.binary_search(&id) {
                        list.remove(at);
                    }
                }
            }
        }
        for g in dedup_triplet(&vertex.triplet) {
            if let Some(ring) = self.grain_junctions.get_mut(&g) {
                if let Ok(at) = ring.binary_search(&id) {
                    ring.remove(at);
                }
            }
        }
        Ok(vertex)
    }

    /// Remove a grain vertex. The caller must have detached every junction
    /// referencing it first.
    pub(crate) fn remove_grain_vertex(&mut self, id: GrainId) -> Result<GrainVertex> {
        if let Some(ring) = self.grain_junctions.get(&id) {
            if !ring.is_empty() {
                return Err(Error::Precondition(format!(
                    "grain {id} still referenced by {} junctions",
                    ring.len()
                )));
            }
        }
        self.grain_junctions.remove(&id);
        self.grains
            .remove(&id)
            .ok_or(Error::Lookup { kind: "grain", id })
    }

    /// The three junction neighbors of a junction (two while a transient
    /// two-sided grain exists mid-edit).
    pub fn junction_neighbors(&self, id: JunctionId) -> Result<&[JunctionId]> {
        self.require_junction(id)?;
        Ok(self.adjacency.get(&id).map(Vec::as_slice).unwrap_or(&[]))
    }

    pub fn junction_triplet(&self, id: JunctionId) -> Result<[GrainId; 3]> {
        Ok(self.require_junction(id)?.triplet)
    }

    /// Junctions whose triplet contains the grain, sorted by id.
    pub fn grain_junctions(&self, id: GrainId) -> Result<&[JunctionId]> {
        self.require_grain(id)?;
        Ok(self
            .grain_junctions
            .get(&id)
            .map(Vec::as_slice)
            .unwrap_or(&[]))
    }

    pub fn neighbors(&self, vertex: VertexId) -> Result<NeighborSet> {
        match vertex {
            VertexId::Junction(id) => {
                let junction = self.require_junction(id)?;
                Ok(NeighborSet::Junction {
                    grains: junction.grain_set(),
                    junctions: self.junction_neighbors(id)?.to_vec(),
                })
            }
            VertexId::Grain(id) => Ok(NeighborSet::Grain {
                junctions: self.grain_junctions(id)?.to_vec(),
            }),
        }
    }

    /// Distinct grains shared by the triplets of an edge's endpoints. For a
    /// valid edge this is exactly the pair of grains the edge separates.
    pub fn edge_shared_grains(&self, a: JunctionId, b: JunctionId) -> Result<Vec<GrainId>> {
        let ta = self.require_junction(a)?.grain_set();
        let tb = self.require_junction(b)?.grain_set();
        Ok(ta.into_iter().filter(|g| tb.contains(g)).collect())
    }

    /// Periodic length of a junction-junction edge in micrometers.
    pub fn edge_length_phys(&self, a: JunctionId, b: JunctionId) -> Result<f64> {
        let pa = self.require_junction(a)?.pos;
        let pb = self.require_junction(b)?.pos;
        Ok(geometry::periodic_distance(
            pa,
            pb,
            self.domain.lx,
            self.domain.ly,
        ))
    }

    /// Junction ring of a grain ordered by angle about the grain centroid,
    /// with every ring member unwrapped to the centroid's periodic image.
    /// Voronoi cells are star-shaped about their centroid, so the angular
    /// order is the boundary order.
    pub fn grain_ring(&self, id: GrainId) -> Result<Vec<JunctionId>> {
        let grain = self.require_grain(id)?;
        let ring = self.grain_junctions(id)?;
        let mut keyed: Vec<(f64, JunctionId)> = ring
            .iter()
            .map(|&j| {
                let rel = geometry::min_image_vec(self.junctions[&j].pos, grain.centroid);
                (rel.y.atan2(rel.x), j)
            })
            .collect();
        keyed.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
        });
        Ok(keyed.into_iter().map(|(_, j)| j).collect())
    }

    /// Recompute one grain centroid as the periodic mean of its junction
    /// ring, unwrapped around the lowest-id ring member.
    pub fn recompute_centroid(&mut self, id: GrainId) -> Result<()> {
        let ring = self.grain_junctions(id)?.to_vec();
        let centroid = if ring.is_empty() {
            self.grains[&id].centroid
        } else {
            let pts: Vec<Vec2> = ring.iter().map(|j| self.junctions[j].pos).collect();
            geometry::periodic_mean(&pts)
        };
        self.grains.get_mut(&id).expect("grain exists").centroid = centroid;
        Ok(())
    }

    pub fn recompute_centroids(&mut self) {
        let ids: Vec<GrainId> = self.grains.keys().copied().collect();
        for id in ids {
            let _ = self.recompute_centroid(id);
        }
    }

    /// Check every structural invariant and report all offenders.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let n_g = self.grains.len();
        report.sub_minimal = n_g < 3;

        for (&id, junction) in &self.junctions {
            let degree = self.adjacency.get(&id).map(Vec::len).unwrap_or(0);
            if degree != 3 {
                report.violations.push(Violation::JunctionDegree {
                    junction: id,
                    degree,
                });
            }
            for g in dedup_triplet(&junction.triplet) {
                if !self.grains.contains_key(&g) {
                    report.violations.push(Violation::UnknownTripletGrain {
                        junction: id,
                        grain: g,
                    });
                }
            }
            // Repeated ids are unavoidable topology below three grains (a
            // cell can border itself around the torus); above that they are
            // treated as corruption.
            if n_g >= 3 && junction.grain_set().len() != 3 {
                report
                    .violations
                    .push(Violation::RepeatedTriplet { junction: id });
            }
            let p = junction.pos;
            if !(p.is_finite() && (0.0..1.0).contains(&p.x) && (0.0..1.0).contains(&p.y)) {
                report
                    .violations
                    .push(Violation::CoordinateRange { junction: id });
            }
        }

        let mut last_edge = None;
        for (a, b) in self.edges() {
            let shared = self.edge_shared_grains(a, b).map(|s| s.len()).unwrap_or(0);
            if shared != 2 {
                report
                    .violations
                    .push(Violation::EdgeSharedGrains { a, b, shared });
            }
            // Parallel edges are inherent below three grains; above, they
            // indicate a corrupt or mid-edit state.
            if n_g >= 3 && last_edge == Some((a, b)) {
                report.violations.push(Violation::DuplicateEdge { a, b });
            }
            last_edge = Some((a, b));
        }

        let n_j = self.junctions.len();
        let e_jj = self.jj_edge_count();
        let trivial = n_g <= 1 && n_j == 0;
        if !trivial && (n_j != 2 * n_g || e_jj != 3 * n_g) {
            report.violations.push(Violation::EulerCounts {
                grains: n_g,
                junctions: n_j,
                jj_edges: e_jj,
            });
        }

        for (&id, grain) in &self.grains {
            let norm = (grain.orientation[0].powi(2)
                + grain.orientation[1].powi(2)
                + grain.orientation[2].powi(2))
            .sqrt();
            if (norm - 1.0).abs() > ORIENTATION_NORM_TOL {
                report
                    .violations
                    .push(Violation::OrientationNorm { grain: id });
            }
            if grain.area < 0.0 {
                report
                    .violations
                    .push(Violation::NegativeArea { grain: id });
            }
            if grain.excess_volume < 0.0 {
                report
                    .violations
                    .push(Violation::NegativeExcessVolume { grain: id });
            }
            if let Some(ring) = self.grain_junctions.get(&id) {
                if !ring.is_empty() {
                    let pts: Vec<Vec2> = ring.iter().map(|j| self.junctions[j].pos).collect();
                    let fresh = geometry::periodic_mean(&pts);
                    let d = geometry::min_image_vec(fresh, grain.centroid);
                    if d.x.hypot(d.y) > 1e-9 {
                        report
                            .violations
                            .push(Violation::StaleCentroid { grain: id });
                    }
                }
            }
        }

        report
    }

    /// Cheap structural checks run after every engine update: degrees,
    /// Euler counts, and triplet references. Full validation including the
    /// shared-grain rule is `validate`.
    pub fn check_core(&self) -> Result<()> {
        for (&id, junction) in &self.junctions {
            let degree = self.adjacency.get(&id).map(Vec::len).unwrap_or(0);
            if degree != 3 {
                return Err(Error::Contract(format!(
                    "junction {id} has degree {degree} after update"
                )));
            }
            for g in dedup_triplet(&junction.triplet) {
                if !self.grains.contains_key(&g) {
                    return Err(Error::Contract(format!(
                        "junction {id} references removed grain {g}"
                    )));
                }
            }
        }
        let n_g = self.grains.len();
        if self.junctions.len() != 2 * n_g || self.jj_edge_count() != 3 * n_g {
            return Err(Error::Contract(format!(
                "count relation broken: n_g={}, n_j={}, e_jj={}",
                n_g,
                self.junctions.len(),
                self.jj_edge_count()
            )));
        }
        Ok(())
    }

    /// Map `triplet -> junction id` for junction matching across layers.
    /// Triplets that occur more than once map to `None`: such junctions
    /// cannot be identified by their grain neighbors.
    pub fn triplet_index(&self) -> HashMap<[GrainId; 3], Option<JunctionId>> {
        let mut map: HashMap<[GrainId; 3], Option<JunctionId>> = HashMap::new();
        for (&id, junction) in &self.junctions {
            map.entry(junction.triplet)
                .and_modify(|slot| *slot = None)
                .or_insert(Some(id));
        }
        map
    }

    /// Translate every coordinate by `(dx, dy)` modulo the domain. Topology
    /// is untouched; cached centroids shift with the junctions.
    pub fn translate(&mut self, dx: f64, dy: f64) {
        for junction in self.junctions.values_mut() {
            junction.pos = (junction.pos + Vec2::new(dx, dy)).wrapped();
        }
        for grain in self.grains.values_mut() {
            grain.centroid = (grain.centroid + Vec2::new(dx, dy)).wrapped();
        }
    }
}

pub(crate) fn dedup_triplet(triplet: &[GrainId; 3]) -> Vec<GrainId> {
    let mut v = triplet.to_vec();
    v.dedup();
    v
}

// ---------------------------------------------------------------------------
// Serialization: a self-describing JSON document. Junction-grain edges are
// reconstructed from triplets and never written. serde_json emits shortest
// round-trip float representations, so no precision is lost.
// ---------------------------------------------------------------------------

pub const GRAPH_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SerDomain {
    lx: f64,
    ly: f64,
    lz: f64,
    g_z: f64,
    r_z: f64,
    g_max: f64,
    r_max: f64,
    l0x: f64,
    l0y: f64,
    l0z: f64,
    z_l: f64,
    dz: f64,
}

#[derive(Serialize, Deserialize)]
struct SerGrain {
    id: GrainId,
    orientation: [f64; 3],
    area: f64,
    excess_volume: f64,
    delta_area: f64,
}

#[derive(Serialize, Deserialize)]
struct SerJunction {
    id: JunctionId,
    x: f64,
    y: f64,
    dx: f64,
    dy: f64,
    triplet: [GrainId; 3],
}

#[derive(Serialize, Deserialize)]
struct SerGraph {
    format_version: u32,
    domain: SerDomain,
    grains: Vec<SerGrain>,
    junctions: Vec<SerJunction>,
    e_jj: Vec<(JunctionId, JunctionId)>,
}

impl GrainGraph {
    pub fn to_json_string(&self) -> Result<String> {
        let doc = SerGraph {
            format_version: GRAPH_FORMAT_VERSION,
            domain: SerDomain {
                lx: self.domain.lx,
                ly: self.domain.ly,
                lz: self.domain.lz,
                g_z: self.domain.g_z,
                r_z: self.domain.r_z,
                g_max: self.domain.g_max,
                r_max: self.domain.r_max,
                l0x: self.domain.l0x,
                l0y: self.domain.l0y,
                l0z: self.domain.l0z,
                z_l: self.z_layer,
                dz: self.dz_prev,
            },
            grains: self
                .grains
                .values()
                .map(|g| SerGrain {
                    id: g.id,
                    orientation: g.orientation,
                    area: g.area,
                    excess_volume: g.excess_volume,
                    delta_area: g.delta_area,
                })
                .collect(),
            junctions: self
                .junctions
                .values()
                .map(|j| SerJunction {
                    id: j.id,
                    x: j.pos.x,
                    y: j.pos.y,
                    dx: j.delta_pos.x,
                    dy: j.delta_pos.y,
                    triplet: j.triplet,
                })
                .collect(),
            e_jj: self.edges().collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: SerGraph = serde_json::from_str(text)?;
        if doc.format_version != GRAPH_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported graph format version {}",
                doc.format_version
            )));
        }
        let domain = DomainSpec {
            lx: doc.domain.lx,
            ly: doc.domain.ly,
            lz: doc.domain.lz,
            g_z: doc.domain.g_z,
            r_z: doc.domain.r_z,
            g_max: doc.domain.g_max,
            r_max: doc.domain.r_max,
            l0x: doc.domain.l0x,
            l0y: doc.domain.l0y,
            l0z: doc.domain.l0z,
        }
        .normalized_defaults();
        let mut graph = GrainGraph::new(domain);
        graph.set_z_layer(doc.domain.z_l);
        graph.set_dz_prev(doc.domain.dz);
        for g in &doc.grains {
            graph.add_grain_unit(g.id, g.orientation, g.area, g.excess_volume, g.delta_area)?;
        }
        for j in &doc.junctions {
            graph.add_junction_with_id(
                j.id,
                Vec2::new(j.x, j.y),
                Vec2::new(j.dx, j.dy),
                j.triplet,
            )?;
        }
        for &(a, b) in &doc.e_jj {
            // Repeated pairs are parallel edges (legal on few-grain tori).
            graph.insert_edge_entry(a, b)?;
        }
        graph.recompute_centroids();
        Ok(graph)
    }

    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn read_json(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }
}
