//! Topological edit operations on grain graphs, layer-pair matching, and the
//! layer-spacing policy.
//!
//! Two primitives cover every coarsening event. A neighbor switch
//! ([`apply_edge_flip`]) contracts a boundary edge into a transient
//! quadruple point and re-expands it with swapped grain adjacency: the two
//! grains that shared the edge each lose a face, the two grains at its ends
//! each gain one. A grain removal ([`remove_grain`]) deletes a grain that
//! has been flipped down to two sides, together with its two junctions, and
//! bridges the severed neighbors. Eliminating an n-sided grain is therefore
//! n-2 flips followed by one removal ([`eliminate_grain`]).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::domain::DomainSpec;
use crate::error::{Error, Result};
use crate::geometry::{self, Vec2};
use crate::graph::{GrainGraph, GrainId, JunctionId};

/// Record of one applied neighbor switch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeFlip {
    /// The contracted edge, by the ids that existed before the flip.
    pub old: (JunctionId, JunctionId),
    /// Grains that shared the edge and lost a face, ascending.
    pub losing: (GrainId, GrainId),
    /// Grains at the ends of the edge that gained a face: the first is the
    /// non-shared grain of `old.0`, the second of `old.1`.
    pub gaining: (GrainId, GrainId),
    /// Fresh junctions replacing the pair: the first carries the lower
    /// losing grain in its triplet, the second the higher.
    pub new: (JunctionId, JunctionId),
    /// External re-attachments: (old endpoint, external junction, new
    /// endpoint), one entry per surviving edge of the flipped pair.
    pub rewires: Vec<(JunctionId, JunctionId, JunctionId)>,
}

/// Record of one grain removal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrainRemoval {
    pub grain: GrainId,
    pub junctions: (JunctionId, JunctionId),
    /// Distinct edge pairs deleted: the two-gon boundary and the two
    /// external stubs.
    pub removed_edges: Vec<(JunctionId, JunctionId)>,
    /// Bridge inserted between the severed external junctions.
    pub added_edge: (JunctionId, JunctionId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Elimination {
    pub grain: GrainId,
    pub flips: Vec<EdgeFlip>,
    pub removal: GrainRemoval,
}

/// Neighbor switch with the standalone guard: refuses to reduce a 3-sided
/// grain to two sides. Elimination cascades run the permissive variant.
pub fn apply_edge_flip(graph: &mut GrainGraph, j1: JunctionId, j2: JunctionId) -> Result<EdgeFlip> {
    flip_inner(graph, j1, j2, false)
}

/// Neighbor switch inside an elimination cascade: two-sided intermediates
/// are expected and cleaned up by the caller.
pub fn apply_edge_flip_in_cascade(
    graph: &mut GrainGraph,
    j1: JunctionId,
    j2: JunctionId,
) -> Result<EdgeFlip> {
    flip_inner(graph, j1, j2, true)
}

fn flip_inner(
    graph: &mut GrainGraph,
    j1: JunctionId,
    j2: JunctionId,
    in_cascade: bool,
) -> Result<EdgeFlip> {
    match graph.edge_multiplicity(j1, j2) {
        0 => return Err(Error::input(format!("({j1}, {j2}) is not a boundary edge"))),
        1 => {}
        _ => {
            return Err(Error::Precondition(format!(
                "({j1}, {j2}) bounds a two-sided grain; remove the grain instead"
            )))
        }
    }

    let t1 = graph.require_junction(j1)?.grain_set();
    let t2 = graph.require_junction(j2)?.grain_set();
    if t1.len() != 3 || t2.len() != 3 {
        return Err(Error::Precondition(format!(
            "flip on ({j1}, {j2}) needs three distinct grains per junction"
        )));
    }
    let shared: Vec<GrainId> = t1.iter().copied().filter(|g| t2.contains(g)).collect();
    if shared.len() != 2 {
        return Err(Error::Precondition(format!(
            "edge ({j1}, {j2}) endpoints share {} grains, expected 2",
            shared.len()
        )));
    }
    let (s_lo, s_hi) = (shared[0].min(shared[1]), shared[0].max(shared[1]));
    let d1 = *t1.iter().find(|g| !shared.contains(g)).expect("non-shared");
    let d2 = *t2.iter().find(|g| !shared.contains(g)).expect("non-shared");

    for losing in [s_lo, s_hi] {
        let sides = graph.grain_junctions(losing)?.len();
        if sides < 3 {
            return Err(Error::Precondition(format!(
                "losing grain {losing} has only {sides} junctions"
            )));
        }
        if sides == 3 && !in_cascade {
            return Err(Error::GuardedFlip {
                grain: losing,
                j1,
                j2,
            });
        }
    }

    let triplet_a = sorted3([d1, d2, s_lo]);
    let triplet_b = sorted3([d1, d2, s_hi]);

    // Externals re-attach to whichever new junction carries both grains of
    // the face they separate.
    let mut rewires: Vec<(JunctionId, bool, JunctionId)> = Vec::with_capacity(4);
    for (end, other) in [(j1, j2), (j2, j1)] {
        let t_end = graph.require_junction(end)?.grain_set();
        let mut skipped_other = false;
        for &u in graph.junction_neighbors(end)? {
            if u == other && !skipped_other {
                skipped_other = true;
                continue;
            }
            let tu = graph.require_junction(u)?.grain_set();
            let face: Vec<GrainId> = t_end.iter().copied().filter(|g| tu.contains(g)).collect();
            if face.len() != 2 {
                return Err(Error::Precondition(format!(
                    "external edge ({end}, {u}) has an ambiguous face"
                )));
            }
            let to_a = face.iter().all(|g| triplet_a.contains(g));
            let to_b = face.iter().all(|g| triplet_b.contains(g));
            match (to_a, to_b) {
                (true, false) => rewires.push((end, true, u)),
                (false, true) => rewires.push((end, false, u)),
                _ => {
                    return Err(Error::Precondition(format!(
                        "external edge ({end}, {u}) matches neither new junction"
                    )))
                }
            }
        }
    }
    if rewires.len() != 4 {
        return Err(Error::Precondition(format!(
            "expected 4 external edges at ({j1}, {j2}), found {}",
            rewires.len()
        )));
    }

    let mid = geometry::periodic_midpoint(
        graph.require_junction(j1)?.pos,
        graph.require_junction(j2)?.pos,
    );

    graph.remove_junction(j1)?;
    graph.remove_junction(j2)?;
    let id_a = graph.add_junction(mid, Vec2::ZERO, triplet_a)?;
    let id_b = graph.add_junction(mid, Vec2::ZERO, triplet_b)?;
    graph.insert_edge_entry(id_a, id_b)?;
    let mut rewired = Vec::with_capacity(4);
    for (end, to_a, u) in rewires {
        let target = if to_a { id_a } else { id_b };
        graph.insert_edge_entry(target, u)?;
        rewired.push((end, u, target));
    }
    for g in [d1, d2, s_lo, s_hi] {
        graph.recompute_centroid(g)?;
    }

    Ok(EdgeFlip {
        old: (j1, j2),
        losing: (s_lo, s_hi),
        gaining: (d1, d2),
        new: (id_a, id_b),
        rewires: rewired,
    })
}

fn sorted3(mut t: [GrainId; 3]) -> [GrainId; 3] {
    t.sort_unstable();
    t
}

/// Terminal removal of a two-sided grain: the grain, its two junctions, the
/// double boundary edge and both external stubs go away; a bridge connects
/// the severed neighbors.
pub fn remove_grain(graph: &mut GrainGraph, grain: GrainId) -> Result<GrainRemoval> {
    let ring = graph.grain_junctions(grain)?.to_vec();
    if ring.len() != 2 {
        return Err(Error::Precondition(format!(
            "grain {grain} has {} junctions; removal needs exactly 2 (flip first)",
            ring.len()
        )));
    }
    let (a, b) = (ring[0], ring[1]);
    if graph.edge_multiplicity(a, b) != 2 {
        return Err(Error::Precondition(format!(
            "grain {grain} junctions ({a}, {b}) do not bound a two-gon"
        )));
    }
    let external = |g: &GrainGraph, from: JunctionId, skip: JunctionId| -> Result<JunctionId> {
        let ext: Vec<JunctionId> = g
            .junction_neighbors(from)?
            .iter()
            .copied()
            .filter(|&u| u != skip)
            .collect();
        match ext[..] {
            [u] => Ok(u),
            _ => Err(Error::Precondition(format!(
                "junction {from} has {} external edges, expected 1",
                ext.len()
            ))),
        }
    };
    let u = external(graph, a, b)?;
    let v = external(graph, b, a)?;
    if u == v {
        return Err(Error::DegenerateCollapse(format!(
            "removing grain {grain} would create a self edge at junction {u}"
        )));
    }
    // The bridge may duplicate an existing (u, v) edge: the two survivors
    // then share two boundary arcs, which is real torus topology. If the
    // pocket between the arcs is a grain it is now two-sided and the
    // caller's sweep removes it next.

    let survivors: Vec<GrainId> = graph
        .require_junction(a)?
        .grain_set()
        .into_iter()
        .filter(|&g| g != grain)
        .collect();

    graph.remove_junction(a)?;
    graph.remove_junction(b)?;
    graph.remove_grain_vertex(grain)?;
    graph.insert_edge_entry(u, v)?;
    for g in survivors {
        graph.recompute_centroid(g)?;
    }

    Ok(GrainRemoval {
        grain,
        junctions: (a, b),
        removed_edges: vec![
            (a.min(b), a.max(b)),
            (a.min(u), a.max(u)),
            (b.min(v), b.max(v)),
        ],
        added_edge: (u.min(v), u.max(v)),
    })
}

/// Full elimination of a grain: flip its faces away in ascending order of
/// the neighboring grain's area change until two sides remain, then remove.
/// `ds_of` supplies the ordering key (predicted area change during
/// evolution; the stored `delta_area` for standalone use). `on_flip` sees
/// every cascade flip right after it is applied.
pub fn eliminate_grain_with(
    graph: &mut GrainGraph,
    grain: GrainId,
    ds_of: &dyn Fn(GrainId) -> f64,
    mut on_flip: impl FnMut(&GrainGraph, &EdgeFlip),
) -> Result<Elimination> {
    let sides = graph.grain_junctions(grain)?.len();
    if sides < 2 {
        return Err(Error::Precondition(format!(
            "grain {grain} has {sides} junctions; cannot eliminate"
        )));
    }
    let mut flips = Vec::new();

    // Planned face order, smallest neighbor growth first, last two faces
    // left for the terminal removal.
    let mut planned = boundary_faces(graph, grain)?;
    planned.sort_by(|x, y| {
        ds_of(x.0)
            .partial_cmp(&ds_of(y.0))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(x.0.cmp(&y.0))
            .then(x.1.cmp(&y.1))
    });
    planned.truncate(planned.len().saturating_sub(2));

    for (neighbor, _) in planned {
        if graph.grain_junctions(grain)?.len() <= 2 {
            break;
        }
        if let Some(edge) = current_face_edge(graph, grain, neighbor)? {
            let flip = apply_edge_flip_in_cascade(graph, edge.0, edge.1)?;
            on_flip(graph, &flip);
            flips.push(flip);
        }
    }
    // Faces can shift under earlier flips (double adjacencies); finish the
    // cascade against the live state.
    while graph.grain_junctions(grain)?.len() > 2 {
        let mut faces = boundary_faces(graph, grain)?;
        if faces.len() <= 2 {
            return Err(Error::Precondition(format!(
                "grain {grain} ring and face count disagree"
            )));
        }
        faces.sort_by(|x, y| {
            ds_of(x.0)
                .partial_cmp(&ds_of(y.0))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(x.0.cmp(&y.0))
                .then(x.1.cmp(&y.1))
        });
        let (_, edge) = faces[0];
        let flip = apply_edge_flip_in_cascade(graph, edge.0, edge.1)?;
        on_flip(graph, &flip);
        flips.push(flip);
    }

    let removal = remove_grain(graph, grain)?;
    Ok(Elimination {
        grain,
        flips,
        removal,
    })
}

/// Standalone elimination ordered by the grains' stored area changes.
pub fn eliminate_grain(graph: &mut GrainGraph, grain: GrainId) -> Result<Elimination> {
    let ds: BTreeMap<GrainId, f64> = graph.grains().map(|g| (g.id, g.delta_area)).collect();
    eliminate_grain_with(
        graph,
        grain,
        &|g| ds.get(&g).copied().unwrap_or(0.0),
        |_, _| {},
    )
}

/// Boundary faces of a grain: (neighboring grain, current edge), one entry
/// per boundary edge whose separating pair contains the grain.
pub fn boundary_faces(
    graph: &GrainGraph,
    grain: GrainId,
) -> Result<Vec<(GrainId, (JunctionId, JunctionId))>> {
    let ring: BTreeSet<JunctionId> = graph.grain_junctions(grain)?.iter().copied().collect();
    let mut faces = Vec::new();
    for &j in &ring {
        for &k in graph.junction_neighbors(j)? {
            if k <= j || !ring.contains(&k) {
                continue;
            }
            let shared = graph.edge_shared_grains(j, k)?;
            if shared.len() == 2 && shared.contains(&grain) {
                let other = shared.into_iter().find(|&g| g != grain).expect("pair");
                faces.push((other, (j, k)));
            }
        }
    }
    faces.sort();
    faces.dedup();
    Ok(faces)
}

fn current_face_edge(
    graph: &GrainGraph,
    grain: GrainId,
    neighbor: GrainId,
) -> Result<Option<(JunctionId, JunctionId)>> {
    Ok(boundary_faces(graph, grain)?
        .into_iter()
        .find(|(g, _)| *g == neighbor)
        .map(|(_, e)| e))
}

// ---------------------------------------------------------------------------
// layer-pair matching
// ---------------------------------------------------------------------------

/// Outcome of matching two consecutive layers of one simulation.
#[derive(Debug, Clone, Default)]
pub struct MatchResult {
    /// (previous junction, next junction) matched by identical triplets.
    pub junction_pairs: Vec<(JunctionId, JunctionId)>,
    /// Grains present in both layers.
    pub grain_pairs: Vec<GrainId>,
    /// Per matched junction: minimum-image displacement in reference units.
    pub junction_delta: Vec<(JunctionId, f64, f64)>,
    /// Per matched grain: (area change, next-layer excess volume).
    pub grain_delta: Vec<(GrainId, f64, f64)>,
    /// Neighbor-switch events detected between the layers, by previous ids.
    pub edge_events: Vec<(JunctionId, JunctionId)>,
    /// Grains of the previous layer missing from the next.
    pub grain_eliminations: Vec<GrainId>,
    /// Junctions that no detected event explains; excluded from training.
    pub masked_junctions: Vec<JunctionId>,
    /// Previous-layer edges touching a masked junction.
    pub masked_edges: Vec<(JunctionId, JunctionId)>,
}

pub fn match_graphs(prev: &GrainGraph, next: &GrainGraph) -> Result<MatchResult> {
    let prev_grains: BTreeSet<GrainId> = prev.grain_ids().collect();
    let next_grains: BTreeSet<GrainId> = next.grain_ids().collect();
    if prev_grains.is_disjoint(&next_grains) {
        return Err(Error::Namespace(
            "layers share no grain ids; not consecutive layers of one run".into(),
        ));
    }

    let mut result = MatchResult {
        grain_eliminations: prev_grains.difference(&next_grains).copied().collect(),
        grain_pairs: prev_grains.intersection(&next_grains).copied().collect(),
        ..MatchResult::default()
    };

    let sx = prev.domain().scale_x();
    let sy = prev.domain().scale_y();
    for &g in &result.grain_pairs {
        let a = prev.grain(g).expect("intersection");
        let b = next.grain(g).expect("intersection");
        result
            .grain_delta
            .push((g, b.area - a.area, b.excess_volume));
    }

    let prev_index = prev.triplet_index();
    let next_index = next.triplet_index();
    let mut unmatched: Vec<JunctionId> = Vec::new();
    for j in prev.junctions() {
        let unique_here = matches!(prev_index.get(&j.triplet), Some(Some(id)) if *id == j.id);
        let counterpart = if unique_here {
            next_index.get(&j.triplet).copied().flatten()
        } else {
            None
        };
        match counterpart {
            Some(other) => {
                result.junction_pairs.push((j.id, other));
                let d = geometry::min_image_vec(next.junction(other).expect("index").pos, j.pos);
                result.junction_delta.push((j.id, d.x * sx, d.y * sy));
            }
            None => unmatched.push(j.id),
        }
    }

    // A neighbor switch on an unmatched pair is confirmed when both triplets
    // it would create exist in the next layer.
    let unmatched_set: BTreeSet<JunctionId> = unmatched.iter().copied().collect();
    let mut explained: BTreeSet<JunctionId> = BTreeSet::new();
    let mut seen_pairs: BTreeSet<(JunctionId, JunctionId)> = BTreeSet::new();
    for (a, b) in prev.edges() {
        if !seen_pairs.insert((a, b)) {
            continue;
        }
        if !unmatched_set.contains(&a) || !unmatched_set.contains(&b) {
            continue;
        }
        let ta = prev.junction(a).expect("edge endpoint").grain_set();
        let tb = prev.junction(b).expect("edge endpoint").grain_set();
        if ta.len() != 3 || tb.len() != 3 {
            continue;
        }
        let shared: Vec<GrainId> = ta.iter().copied().filter(|g| tb.contains(g)).collect();
        if shared.len() != 2 {
            continue;
        }
        let d1 = *ta.iter().find(|g| !shared.contains(g)).expect("non-shared");
        let d2 = *tb.iter().find(|g| !shared.contains(g)).expect("non-shared");
        let prod_a = sorted3([d1, d2, shared[0].min(shared[1])]);
        let prod_b = sorted3([d1, d2, shared[0].max(shared[1])]);
        let hit = |t: &[GrainId; 3]| matches!(next_index.get(t), Some(Some(_)));
        if hit(&prod_a) && hit(&prod_b) {
            result.edge_events.push((a, b));
            explained.insert(a);
            explained.insert(b);
        }
    }

    result.masked_junctions = unmatched
        .into_iter()
        .filter(|j| !explained.contains(j))
        .collect();
    let masked: BTreeSet<JunctionId> = result.masked_junctions.iter().copied().collect();
    let mut seen_pairs = BTreeSet::new();
    for (a, b) in prev.edges() {
        if seen_pairs.insert((a, b)) && (masked.contains(&a) || masked.contains(&b)) {
            result.masked_edges.push((a, b));
        }
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// layer-spacing policy
// ---------------------------------------------------------------------------

/// Target fraction of grains eliminated per graph update.
pub const ELIMINATION_FRACTION_PER_STEP: f64 = 0.03;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EliminationEntry {
    pub g_z: f64,
    pub r_z: f64,
    /// Observed fraction of grains eliminated over the full height.
    pub eliminated_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EliminationTable {
    pub entries: Vec<EliminationEntry>,
}

impl EliminationTable {
    pub fn read_json(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Coarse demonstration grid over the supported process window. The
    /// eliminated fraction falls with the gradient and rises with the pull
    /// velocity; values are illustrative defaults, not fitted data.
    pub fn demo_grid() -> Self {
        let mut entries = Vec::new();
        let mut g = 0.5;
        while g <= 10.0 + 1e-9 {
            let mut r = 0.2;
            while r <= 2.0 + 1e-9 {
                let frac = f64::clamp(0.70 - 0.05 * g + 0.10 * r, 0.05, 0.9);
                entries.push(EliminationEntry {
                    g_z: g,
                    r_z: r,
                    eliminated_fraction: (frac * 100.0).round() / 100.0,
                });
                r += 0.2;
            }
            g += 0.5;
        }
        EliminationTable { entries }
    }
}

/// Pick the layer count and spacing for a run: the nearest tabulated process
/// point (normalized Euclidean metric) supplies the expected elimination
/// fraction; the layer count targets 3% eliminations per update.
pub fn delta_z_policy(domain: &DomainSpec, table: &EliminationTable) -> Result<(f64, usize)> {
    if table.entries.is_empty() {
        return Err(Error::config("elimination table is empty"));
    }
    domain.check()?;
    let mut best = (f64::INFINITY, 0usize);
    for (i, e) in table.entries.iter().enumerate() {
        let dg = (domain.g_z - e.g_z) / domain.g_max;
        let dr = (domain.r_z - e.r_z) / domain.r_max;
        let d2 = dg * dg + dr * dr;
        if d2 < best.0 {
            best = (d2, i);
        }
    }
    let fraction = table.entries[best.1].eliminated_fraction;
    let n_l = ((fraction / ELIMINATION_FRACTION_PER_STEP).round() as i64).max(2) as usize;
    let dz = domain.lz / (n_l as f64 - 1.0);
    Ok((dz, n_l))
}

// ---------------------------------------------------------------------------
// training-pair archive
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct PairRecord {
    prev: serde_json::Value,
    next: serde_json::Value,
    delta: serde_json::Value,
    events: serde_json::Value,
    masked: serde_json::Value,
}

/// One line of the training-pair archive: both graphs, feature deltas,
/// detected events, and masks.
pub fn training_record(prev: &GrainGraph, next: &GrainGraph, m: &MatchResult) -> Result<String> {
    let record = PairRecord {
        prev: serde_json::from_str(&prev.to_json_string()?)?,
        next: serde_json::from_str(&next.to_json_string()?)?,
        delta: serde_json::json!({
            "junctions": m.junction_delta
                .iter()
                .map(|(id, dx, dy)| serde_json::json!({"id": id, "dx": dx, "dy": dy}))
                .collect::<Vec<_>>(),
            "grains": m.grain_delta
                .iter()
                .map(|(id, ds, v)| serde_json::json!({"id": id, "ds": ds, "v": v}))
                .collect::<Vec<_>>(),
        }),
        events: serde_json::json!({
            "edges": m.edge_events,
            "grains": m.grain_eliminations,
        }),
        masked: serde_json::json!({
            "junctions": m.masked_junctions,
            "edges": m.masked_edges,
        }),
    };
    Ok(serde_json::to_string(&record)?)
}

/// Write one record per line.
pub fn write_pair_archive(records: &[String], path: &std::path::Path) -> Result<()> {
    let mut text = records.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Parse an archive back into (prev, next, events) tuples.
pub fn read_pair_archive(
    path: &std::path::Path,
) -> Result<Vec<(GrainGraph, GrainGraph, serde_json::Value)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let record: PairRecord = serde_json::from_str(line)?;
        let prev = GrainGraph::from_json_str(&serde_json::to_string(&record.prev)?)?;
        let next = GrainGraph::from_json_str(&serde_json::to_string(&record.next)?)?;
        out.push((prev, next, record.events));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::substrate;

    fn domain_40() -> DomainSpec {
        DomainSpec::new(40.0, 40.0, 50.0, 10.0, 2.0, 10.0, 2.0)
    }

    fn substrate_graph(seed: u64, n: usize) -> GrainGraph {
        let mut rng = Rng::from_seed(seed);
        let seeds = substrate::uniform_seeds(n, &mut rng).unwrap();
        let orientations = substrate::sample_orientations(n, &mut rng);
        substrate::periodic_voronoi(&seeds, &orientations, &domain_40()).unwrap()
    }

    /// Pick an edge that is legal to flip standalone: both shared grains
    /// keep at least three sides afterwards.
    fn flippable_edge(graph: &GrainGraph) -> (JunctionId, JunctionId) {
        for (a, b) in graph.edges() {
            let shared = graph.edge_shared_grains(a, b).unwrap();
            if shared.len() == 2
                && shared
                    .iter()
                    .all(|&g| graph.grain_junctions(g).unwrap().len() >= 4)
            {
                return (a, b);
            }
        }
        panic!("no flippable edge in test graph");
    }

    fn triplet_multiset(graph: &GrainGraph) -> Vec<[GrainId; 3]> {
        let mut t: Vec<[GrainId; 3]> = graph.junctions().map(|j| j.triplet).collect();
        t.sort_unstable();
        t
    }

    #[test]
    fn flip_preserves_counts_and_rewires_faces() {
        let mut graph = substrate_graph(40, 30);
        let (j1, j2) = flippable_edge(&graph);
        let n_g = graph.grain_count();
        let n_j = graph.junction_count();
        let e_jj = graph.jj_edge_count();
        let ring_before: BTreeMap<GrainId, usize> = graph
            .grain_ids()
            .map(|g| (g, graph.grain_junctions(g).unwrap().len()))
            .collect();

        let flip = apply_edge_flip(&mut graph, j1, j2).unwrap();

        assert_eq!(graph.grain_count(), n_g);
        assert_eq!(graph.junction_count(), n_j);
        assert_eq!(graph.jj_edge_count(), e_jj);
        assert_eq!(graph.jg_edge_count(), 6 * n_g);

        // Gaining grains' rings grew by one, losing grains' shrank by one.
        for (g, delta) in [
            (flip.gaining.0, 1i64),
            (flip.gaining.1, 1),
            (flip.losing.0, -1),
            (flip.losing.1, -1),
        ] {
            let now = graph.grain_junctions(g).unwrap().len() as i64;
            assert_eq!(now - ring_before[&g] as i64, delta, "grain {g}");
        }

        // New junctions both border both gaining grains.
        let ta = graph.junction_triplet(flip.new.0).unwrap();
        let tb = graph.junction_triplet(flip.new.1).unwrap();
        for t in [&ta, &tb] {
            assert!(t.contains(&flip.gaining.0));
            assert!(t.contains(&flip.gaining.1));
        }
        assert!(ta.contains(&flip.losing.0));
        assert!(tb.contains(&flip.losing.1));
        assert!(graph.has_edge(flip.new.0, flip.new.1));
        assert!(graph.validate().is_valid());
    }

    #[test]
    fn flip_twice_restores_the_topology() {
        let mut graph = substrate_graph(41, 30);
        let before = triplet_multiset(&graph);
        let (j1, j2) = flippable_edge(&graph);
        let flip = apply_edge_flip(&mut graph, j1, j2).unwrap();
        assert_ne!(before, triplet_multiset(&graph));
        apply_edge_flip(&mut graph, flip.new.0, flip.new.1).unwrap();
        assert_eq!(before, triplet_multiset(&graph));
        assert!(graph.validate().is_valid());
    }

    #[test]
    fn flip_is_deterministic() {
        let g0 = substrate_graph(42, 25);
        let (j1, j2) = flippable_edge(&g0);
        let mut a = g0.clone();
        let mut b = g0.clone();
        let fa = apply_edge_flip(&mut a, j1, j2).unwrap();
        let fb = apply_edge_flip(&mut b, j1, j2).unwrap();
        assert_eq!(fa, fb);
        assert_eq!(a.to_json_string().unwrap(), b.to_json_string().unwrap());
    }

    #[test]
    fn non_edge_is_an_input_error() {
        let mut graph = substrate_graph(43, 20);
        let ids: Vec<JunctionId> = graph.junction_ids().collect();
        let (a, b) = ids
            .iter()
            .flat_map(|&a| ids.iter().map(move |&b| (a, b)))
            .find(|&(a, b)| a < b && !graph.has_edge(a, b))
            .unwrap();
        assert!(matches!(
            apply_edge_flip(&mut graph, a, b),
            Err(Error::Input(_))
        ));
    }

    /// Strip faces off a grain with legal flips until it has `k` sides.
    fn reduce_grain_to(graph: &mut GrainGraph, grain: GrainId, k: usize) -> bool {
        while graph.grain_junctions(grain).unwrap().len() > k {
            let faces = boundary_faces(graph, grain).unwrap();
            let candidate = faces.iter().find(|(other, _)| {
                graph.grain_junctions(*other).unwrap().len() >= 4
                    && graph.grain_junctions(grain).unwrap().len() >= 4
            });
            match candidate {
                Some((_, edge)) => {
                    apply_edge_flip(graph, edge.0, edge.1).unwrap();
                }
                None => return false,
            }
        }
        true
    }

    #[test]
    fn standalone_flip_on_triangle_grain_is_guarded() {
        let mut graph = substrate_graph(44, 40);
        let grain = graph
            .grain_ids()
            .find(|&g| graph.grain_junctions(g).unwrap().len() >= 5)
            .unwrap();
        assert!(reduce_grain_to(&mut graph, grain, 3));
        let faces = boundary_faces(&graph, grain).unwrap();
        let (_, edge) = faces[0];
        match apply_edge_flip(&mut graph, edge.0, edge.1) {
            Err(Error::GuardedFlip { grain: g, .. }) => assert_eq!(g, grain),
            other => panic!("expected guarded-flip error, got {other:?}"),
        }
    }

    #[test]
    fn elimination_uses_sides_minus_two_flips() {
        for target_sides in 3..=7usize {
            let mut graph = substrate_graph(45, 60);
            let grain = graph
                .grain_ids()
                .find(|&g| graph.grain_junctions(g).unwrap().len() >= target_sides)
                .unwrap();
            if graph.grain_junctions(grain).unwrap().len() > target_sides {
                assert!(reduce_grain_to(&mut graph, grain, target_sides));
            }
            let n_g = graph.grain_count();
            let n_j = graph.junction_count();
            let e_jj = graph.jj_edge_count();

            let outcome = eliminate_grain(&mut graph, grain).unwrap();
            assert_eq!(
                outcome.flips.len(),
                target_sides - 2,
                "{target_sides} sides"
            );
            assert_eq!(outcome.removal.removed_edges.len(), 3);
            assert_eq!(graph.grain_count(), n_g - 1);
            assert_eq!(graph.junction_count(), n_j - 2);
            assert_eq!(graph.jj_edge_count(), e_jj - 3);
            assert_eq!(graph.junction_count(), 2 * graph.grain_count());
            let report = graph.validate();
            assert!(report.is_valid(), "{:?}", report.violations);
        }
    }

    #[test]
    fn removal_bookkeeping_is_exact() {
        let mut graph = substrate_graph(46, 40);
        let grain = graph
            .grain_ids()
            .find(|&g| graph.grain_junctions(g).unwrap().len() == 5)
            .unwrap();
        // Drive to the two-sided state by cascade flips, then measure the
        // terminal removal alone.
        assert!(reduce_grain_to(&mut graph, grain, 4));
        let faces = boundary_faces(&graph, grain).unwrap();
        let (_, edge) = faces[0];
        apply_edge_flip_in_cascade(&mut graph, edge.0, edge.1).unwrap();
        let faces = boundary_faces(&graph, grain).unwrap();
        let (_, edge) = faces[0];
        apply_edge_flip_in_cascade(&mut graph, edge.0, edge.1).unwrap();
        assert_eq!(graph.grain_junctions(grain).unwrap().len(), 2);

        let n_g = graph.grain_count();
        let n_j = graph.junction_count();
        let e_jj = graph.jj_edge_count();
        let removal = remove_grain(&mut graph, grain).unwrap();
        assert_eq!(graph.grain_count(), n_g - 1);
        assert_eq!(graph.junction_count(), n_j - 2);
        assert_eq!(removal.removed_edges.len(), 3);
        assert_eq!(graph.jj_edge_count(), e_jj - 3);
        assert_eq!(graph.jg_edge_count(), 6 * graph.grain_count());
        assert!(graph.has_edge(removal.added_edge.0, removal.added_edge.1));
    }

    #[test]
    fn removal_demands_two_sides() {
        let mut graph = substrate_graph(47, 30);
        let grain = graph.grain_ids().next().unwrap();
        assert!(matches!(
            remove_grain(&mut graph, grain),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn matching_identical_graphs_is_total() {
        let graph = substrate_graph(48, 30);
        let m = match_graphs(&graph, &graph).unwrap();
        assert_eq!(m.junction_pairs.len(), graph.junction_count());
        assert!(m.edge_events.is_empty());
        assert!(m.grain_eliminations.is_empty());
        assert!(m.masked_junctions.is_empty());
        assert!(m
            .junction_delta
            .iter()
            .all(|(_, dx, dy)| *dx == 0.0 && *dy == 0.0));
    }

    #[test]
    fn matching_detects_a_single_flip() {
        let prev = substrate_graph(49, 30);
        let mut next = prev.clone();
        let (j1, j2) = flippable_edge(&next);
        apply_edge_flip(&mut next, j1, j2).unwrap();
        let m = match_graphs(&prev, &next).unwrap();
        assert_eq!(m.edge_events, vec![(j1.min(j2), j1.max(j2))]);
        assert!(m.grain_eliminations.is_empty());
        assert!(m.masked_junctions.is_empty());
        assert!(m.masked_edges.is_empty());
    }

    #[test]
    fn matching_detects_an_elimination() {
        let prev = substrate_graph(50, 40);
        let mut next = prev.clone();
        let grain = next
            .grain_ids()
            .find(|&g| next.grain_junctions(g).unwrap().len() == 5)
            .unwrap();
        let consumed = prev.grain_junctions(grain).unwrap().len();
        eliminate_grain(&mut next, grain).unwrap();
        let m = match_graphs(&prev, &next).unwrap();
        assert_eq!(m.grain_eliminations, vec![grain]);
        assert!(m.edge_events.is_empty());
        // The junctions consumed by the cascade are masked.
        assert_eq!(m.masked_junctions.len(), consumed);
        for &j in &m.masked_junctions {
            assert!(prev.junction_triplet(j).unwrap().contains(&grain));
        }
    }

    #[test]
    fn disjoint_namespaces_are_rejected() {
        let a = substrate_graph(51, 20);
        let mut b = GrainGraph::new(domain_40());
        for id in 100..103 {
            b.add_grain(id, [0.0, 0.0, 1.0], 0.3, 0.0, 0.0).unwrap();
        }
        assert!(matches!(match_graphs(&a, &b), Err(Error::Namespace(_))));
    }

    #[test]
    fn layer_policy_reproduces_the_worked_example() {
        // 100 grains, 40 survive: fraction 0.6 over the full height.
        let table = EliminationTable {
            entries: vec![EliminationEntry {
                g_z: 10.0,
                r_z: 2.0,
                eliminated_fraction: 0.6,
            }],
        };
        let (_, n_l) = delta_z_policy(&domain_40(), &table).unwrap();
        assert_eq!(n_l, 20);
    }

    #[test]
    fn layer_policy_clamps_and_rejects_empty() {
        let table = EliminationTable {
            entries: vec![EliminationEntry {
                g_z: 10.0,
                r_z: 2.0,
                eliminated_fraction: 0.0,
            }],
        };
        let (dz, n_l) = delta_z_policy(&domain_40(), &table).unwrap();
        assert_eq!(n_l, 2);
        assert!((dz - 50.0).abs() < 1e-12);
        let empty = EliminationTable { entries: vec![] };
        assert!(matches!(
            delta_z_policy(&domain_40(), &empty),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn layer_policy_interpolates_by_nearest_grid_point() {
        let domain = DomainSpec::new(40.0, 40.0, 50.0, 1.904, 0.558, 10.0, 2.0);
        let table = EliminationTable::demo_grid();
        let (dz, n_l) = delta_z_policy(&domain, &table).unwrap();
        // Nearest grid point (2.0, 0.6) carries fraction 0.66: 22 layers and
        // a spacing of 50/21, within rounding of the 2.4 reference spacing.
        assert_eq!(n_l, 22);
        assert!((dz - 2.4).abs() <= 0.1, "dz = {dz}");
    }

    #[test]
    fn pair_archive_round_trips() {
        let prev = substrate_graph(52, 20);
        let mut next = prev.clone();
        let (j1, j2) = flippable_edge(&next);
        apply_edge_flip(&mut next, j1, j2).unwrap();
        let m = match_graphs(&prev, &next).unwrap();
        let rec = training_record(&prev, &next, &m).unwrap();
        assert!(!rec.contains('\n'));

        let dir = std::env::temp_dir().join("polygrain_pairs_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("pairs.jsonl");
        write_pair_archive(std::slice::from_ref(&rec), &path).unwrap();
        let back = read_pair_archive(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].0.grain_count(), prev.grain_count());
        assert_eq!(back[0].1.junction_count(), next.junction_count());
        assert_eq!(back[0].2["edges"][0][0], serde_json::json!(j1.min(j2)));
    }
}
