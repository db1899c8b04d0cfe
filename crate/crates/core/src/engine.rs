//! The graph-to-graph update algorithm and trajectory rollout.
//!
//! One update step: a predictor supplies feature changes and per-edge event
//! probabilities; features move first, then topology follows. Grains whose
//! updated area falls below the elimination threshold are processed in
//! ascending area order, each as a cascade of neighbor switches (faces
//! sorted by the neighboring grain's predicted area change) ending in a
//! removal. Remaining edge events apply in descending probability. A final
//! sweep clears any grain that other events reduced to two sides. Every
//! applied or skipped action is logged with its sort key, so a run can be
//! replayed byte for byte.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{normalize_features, FeatureSet};
use crate::geometry::{self, Vec2};
use crate::gnn::{self, WeightBundle};
use crate::graph::{GrainGraph, GrainId, JunctionId};
use crate::topology::{self, EdgeFlip};

/// Per-step outputs a predictor must supply, aligned with the feature set it
/// was handed: displacements and area changes in reference units (bounded to
/// [-1, 1]), non-negative excess volumes, and an event probability per
/// junction-junction edge.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub junction_dx: Vec<f64>,
    pub junction_dy: Vec<f64>,
    pub grain_ds: Vec<f64>,
    pub grain_v: Vec<f64>,
    pub edge_prob: Vec<f64>,
}

pub trait Predictor {
    fn predict(&self, graph: &GrainGraph, features: &FeatureSet) -> Result<Prediction>;
}

/// Classification thresholds: an edge flips when its probability exceeds
/// `eps_e`; a grain is eliminated when its updated area falls below `eps_g`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Thresholds {
    pub eps_e: f64,
    pub eps_g: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            eps_e: 0.6,
            eps_g: 1e-4,
        }
    }
}

impl Thresholds {
    pub fn check(&self) -> Result<()> {
        if !(self.eps_e > 0.0 && self.eps_e < 1.0) {
            return Err(Error::config(format!(
                "eps_e must be in (0,1), got {}",
                self.eps_e
            )));
        }
        if self.eps_g <= 0.0 || !self.eps_g.is_finite() {
            return Err(Error::config(format!(
                "eps_g must be positive, got {}",
                self.eps_g
            )));
        }
        Ok(())
    }
}

/// Predictor that changes nothing: zero deltas, zero probabilities.
#[derive(Debug, Clone, Default)]
pub struct IdentityPredictor;

impl Predictor for IdentityPredictor {
    fn predict(&self, _graph: &GrainGraph, features: &FeatureSet) -> Result<Prediction> {
        Ok(Prediction {
            junction_dx: vec![0.0; features.junction_ids.len()],
            junction_dy: vec![0.0; features.junction_ids.len()],
            grain_ds: vec![0.0; features.grain_ids.len()],
            grain_v: vec![0.0; features.grain_ids.len()],
            edge_prob: vec![0.0; features.edges.len()],
        })
    }
}

/// Weight-free geometric predictor. Junctions relax toward the mean of their
/// neighbors; grains grow or shrink with their side count and how well their
/// growth direction aligns with the pull axis; short edges flip first.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselinePredictor {
    pub kappa: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl Default for BaselinePredictor {
    fn default() -> Self {
        BaselinePredictor {
            kappa: 0.3,
            c1: 0.005,
            c2: 0.02,
            c3: 4.0,
        }
    }
}

impl Predictor for BaselinePredictor {
    fn predict(&self, graph: &GrainGraph, features: &FeatureSet) -> Result<Prediction> {
        let domain = graph.domain();
        let sx = domain.scale_x();
        let sy = domain.scale_y();

        let mut junction_dx = Vec::with_capacity(features.junction_ids.len());
        let mut junction_dy = Vec::with_capacity(features.junction_ids.len());
        for &jid in &features.junction_ids {
            let junction = graph.require_junction(jid)?;
            let nbrs = graph.junction_neighbors(jid)?;
            let mut mx = 0.0;
            let mut my = 0.0;
            for &k in nbrs {
                let rel = geometry::min_image_vec(graph.require_junction(k)?.pos, junction.pos);
                mx += rel.x;
                my += rel.y;
            }
            let n = nbrs.len().max(1) as f64;
            junction_dx.push((self.kappa * mx / n * sx).clamp(-1.0, 1.0));
            junction_dy.push((self.kappa * my / n * sy).clamp(-1.0, 1.0));
        }

        let mean_cos = if features.grain_ids.is_empty() {
            0.0
        } else {
            graph.grains().map(|g| g.theta_z.cos()).sum::<f64>() / graph.grain_count() as f64
        };
        let dz_norm = graph.dz_prev() / domain.l0z;
        let mut grain_ds = Vec::with_capacity(features.grain_ids.len());
        let mut grain_v = Vec::with_capacity(features.grain_ids.len());
        for &gid in &features.grain_ids {
            let grain = graph.require_grain(gid)?;
            let sides = graph.grain_junctions(gid)?.len() as f64;
            let ds = self.c1 * (sides - 6.0) * grain.area
                + self.c2 * (grain.theta_z.cos() - mean_cos) * grain.area;
            grain_ds.push(ds.clamp(-1.0, 1.0));
            grain_v.push((grain.area * dz_norm / 2.0).max(0.0));
        }

        let mean_len = if features.edge_lengths.is_empty() {
            1.0
        } else {
            features.edge_lengths.iter().sum::<f64>() / features.edge_lengths.len() as f64
        };
        let edge_prob = features
            .edge_lengths
            .iter()
            .map(|&l| 1.0 / (1.0 + (-(self.c3 * (mean_len - l) / mean_len)).exp()))
            .collect();

        Ok(Prediction {
            junction_dx,
            junction_dy,
            grain_ds,
            grain_v,
            edge_prob,
        })
    }
}

/// Learned predictor: the regressor supplies feature changes, the classifier
/// event probabilities.
#[derive(Debug, Clone)]
pub struct GnnPredictor {
    pub regressor: WeightBundle,
    pub classifier: WeightBundle,
}

impl GnnPredictor {
    pub fn new(regressor: WeightBundle, classifier: WeightBundle) -> Result<Self> {
        if regressor.kind != gnn::ModelKind::Regressor {
            return Err(Error::Tag {
                expected: "regressor".into(),
                got: regressor.kind.to_string(),
            });
        }
        if classifier.kind != gnn::ModelKind::Classifier {
            return Err(Error::Tag {
                expected: "classifier".into(),
                got: classifier.kind.to_string(),
            });
        }
        Ok(GnnPredictor {
            regressor,
            classifier,
        })
    }
}

impl Predictor for GnnPredictor {
    fn predict(&self, graph: &GrainGraph, features: &FeatureSet) -> Result<Prediction> {
        let reg = gnn::regress(graph, features, &self.regressor)?;
        let prob = gnn::classify(graph, features, &self.classifier)?;
        Ok(Prediction {
            junction_dx: reg.junction_dx,
            junction_dy: reg.junction_dy,
            grain_ds: reg.grain_ds,
            grain_v: reg.grain_v,
            edge_prob: prob,
        })
    }
}

// ---------------------------------------------------------------------------
// event log
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Event {
    /// Neighbor switch. `phase` is "cascade" or "edge"; `key` is the sort
    /// key that scheduled it (neighbor area change or event probability).
    Flip {
        edge: (JunctionId, JunctionId),
        new: (JunctionId, JunctionId),
        phase: String,
        key: f64,
    },
    Remove {
        grain: GrainId,
        junctions: (JunctionId, JunctionId),
        key: f64,
    },
    Sweep {
        grain: GrainId,
    },
    /// Grain pushed into the elimination queue mid-update because a cascade
    /// flip reduced it to two sides.
    Requeue {
        grain: GrainId,
        key: f64,
    },
    Skip {
        edge: (JunctionId, JunctionId),
        key: f64,
        reason: String,
    },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub events: Vec<Event>,
}

impl StepLog {
    pub fn flips(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, Event::Flip { .. }))
            .count()
    }

    pub fn removals(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, Event::Remove { .. }))
            .count()
    }

    pub fn sweeps(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, Event::Sweep { .. }))
            .count()
    }
}

/// Write step logs as one JSON record per line.
pub fn write_event_log(logs: &[StepLog], path: &std::path::Path) -> Result<()> {
    let mut text = String::new();
    for log in logs {
        for event in &log.events {
            let record = serde_json::json!({
                "step": log.step,
                "event": event,
            });
            text.push_str(&serde_json::to_string(&record)?);
            text.push('\n');
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// edge tracking across id churn
// ---------------------------------------------------------------------------

/// Tracks where each scheduled edge event currently lives. Flips rename the
/// junctions of every edge they touch, so an event recorded against the
/// pre-update ids must be applied to the renamed edge later; an event whose
/// edge a cascade already consumed must not run twice.
#[derive(Debug, Default)]
struct EdgeTracker {
    current_of: BTreeMap<(JunctionId, JunctionId), (JunctionId, JunctionId)>,
    originals_at: BTreeMap<(JunctionId, JunctionId), BTreeSet<(JunctionId, JunctionId)>>,
    touching: BTreeMap<JunctionId, BTreeSet<(JunctionId, JunctionId)>>,
}

fn ordered(a: JunctionId, b: JunctionId) -> (JunctionId, JunctionId) {
    (a.min(b), a.max(b))
}

impl EdgeTracker {
    fn insert(&mut self, key: (JunctionId, JunctionId)) {
        self.current_of.insert(key, key);
        self.originals_at.entry(key).or_default().insert(key);
        self.touching.entry(key.0).or_default().insert(key);
        self.touching.entry(key.1).or_default().insert(key);
    }

    fn current(&self, key: (JunctionId, JunctionId)) -> Option<(JunctionId, JunctionId)> {
        self.current_of.get(&key).copied()
    }

    fn drop_current(&mut self, cur: (JunctionId, JunctionId)) -> Vec<(JunctionId, JunctionId)> {
        let originals = self
            .originals_at
            .remove(&cur)
            .map(|s| s.into_iter().collect::<Vec<_>>())
            .unwrap_or_default();
        for key in &originals {
            self.current_of.remove(key);
        }
        if let Some(set) = self.touching.get_mut(&cur.0) {
            set.remove(&cur);
        }
        if let Some(set) = self.touching.get_mut(&cur.1) {
            set.remove(&cur);
        }
        originals
    }

    fn rename(&mut self, old_cur: (JunctionId, JunctionId), new_cur: (JunctionId, JunctionId)) {
        let Some(originals) = self.originals_at.remove(&old_cur) else {
            return;
        };
        if let Some(set) = self.touching.get_mut(&old_cur.0) {
            set.remove(&old_cur);
        }
        if let Some(set) = self.touching.get_mut(&old_cur.1) {
            set.remove(&old_cur);
        }
        for key in &originals {
            self.current_of.insert(*key, new_cur);
        }
        self.touching.entry(new_cur.0).or_default().insert(new_cur);
        self.touching.entry(new_cur.1).or_default().insert(new_cur);
        self.originals_at
            .entry(new_cur)
            .or_default()
            .extend(originals);
    }

    /// Absorb one applied flip: the flipped edge's events are consumed and
    /// returned; rewired externals are renamed.
    fn apply_flip(&mut self, flip: &EdgeFlip) -> Vec<(JunctionId, JunctionId)> {
        let consumed = self.drop_current(ordered(flip.old.0, flip.old.1));
        for &(old_end, external, new_end) in &flip.rewires {
            self.rename(ordered(old_end, external), ordered(new_end, external));
        }
        consumed
    }

    /// Absorb one removal: events on the deleted edges are consumed.
    fn apply_removal(&mut self, removal: &topology::GrainRemoval) -> Vec<(JunctionId, JunctionId)> {
        let mut consumed = Vec::new();
        for &(a, b) in &removal.removed_edges {
            consumed.extend(self.drop_current(ordered(a, b)));
        }
        consumed
    }
}

// ---------------------------------------------------------------------------
// the update step
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
struct AreaKey(f64);

impl Eq for AreaKey {}
impl PartialOrd for AreaKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for AreaKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

fn check_prediction(pred: &Prediction, features: &FeatureSet) -> Result<()> {
    let n_j = features.junction_ids.len();
    let n_g = features.grain_ids.len();
    let n_e = features.edges.len();
    if pred.junction_dx.len() != n_j
        || pred.junction_dy.len() != n_j
        || pred.grain_ds.len() != n_g
        || pred.grain_v.len() != n_g
        || pred.edge_prob.len() != n_e
    {
        return Err(Error::Contract("prediction shape mismatch".into()));
    }
    let bounded = |vs: &[f64]| vs.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v));
    if !bounded(&pred.junction_dx) || !bounded(&pred.junction_dy) || !bounded(&pred.grain_ds) {
        return Err(Error::Contract(
            "displacement or area change outside [-1, 1]".into(),
        ));
    }
    if !pred.grain_v.iter().all(|v| v.is_finite() && *v >= 0.0) {
        return Err(Error::Contract(
            "negative or non-finite excess volume".into(),
        ));
    }
    if !pred
        .edge_prob
        .iter()
        .all(|p| p.is_finite() && (0.0..=1.0).contains(p))
    {
        return Err(Error::Contract("event probability outside [0, 1]".into()));
    }
    Ok(())
}

/// One graph-to-graph update. Returns the next layer's graph and features
/// together with the full event log of the step.
pub fn update_graph(
    graph: &GrainGraph,
    predictor: &dyn Predictor,
    thresholds: &Thresholds,
    dz: f64,
    step: usize,
) -> Result<(GrainGraph, FeatureSet, StepLog)> {
    thresholds.check()?;
    if graph.grain_count() < 3 {
        return Err(Error::input(format!(
            "evolution needs at least 3 grains, got {}",
            graph.grain_count()
        )));
    }
    let features = normalize_features(graph)?;
    let pred = predictor.predict(graph, &features)?;
    check_prediction(&pred, &features)?;

    let mut g = graph.clone();
    let mut log = StepLog {
        step,
        events: Vec::new(),
    };

    // Feature update: positions, areas, volumes, heights.
    g.set_z_layer(graph.z_layer() + dz);
    g.set_dz_prev(dz);
    let inv_sx = 1.0 / graph.domain().scale_x();
    let inv_sy = 1.0 / graph.domain().scale_y();
    for (i, &jid) in features.junction_ids.iter().enumerate() {
        let delta = Vec2::new(pred.junction_dx[i] * inv_sx, pred.junction_dy[i] * inv_sy);
        let junction = g.junction_mut(jid).expect("junction from features");
        junction.pos = (junction.pos + delta).wrapped();
        junction.delta_pos = delta;
    }
    let mut ds_of: HashMap<GrainId, f64> = HashMap::with_capacity(features.grain_ids.len());
    for (i, &gid) in features.grain_ids.iter().enumerate() {
        let grain = g.grain_mut(gid).expect("grain from features");
        grain.area += pred.grain_ds[i];
        grain.delta_area = pred.grain_ds[i];
        grain.excess_volume = pred.grain_v[i];
        ds_of.insert(gid, pred.grain_ds[i]);
    }
    g.recompute_centroids();

    // Scheduled edge events above threshold, tracked through id churn.
    let mut s_e: BTreeMap<(JunctionId, JunctionId), f64> = BTreeMap::new();
    let mut tracker = EdgeTracker::default();
    for (e, &(a, b)) in features.edges.iter().enumerate() {
        let p = pred.edge_prob[e];
        if p > thresholds.eps_e {
            let key = ordered(a, b);
            if s_e.insert(key, p).is_none() {
                tracker.insert(key);
            }
        }
    }

    // Grain eliminations, smallest updated area first.
    let mut queue: BTreeSet<(AreaKey, GrainId)> = g
        .grains()
        .filter(|grain| grain.area < thresholds.eps_g)
        .map(|grain| (AreaKey(grain.area), grain.id))
        .collect();
    let mut queued: BTreeSet<GrainId> = queue.iter().map(|(_, g)| *g).collect();

    while let Some(&(key, grain)) = queue.iter().next() {
        queue.remove(&(key, grain));
        queued.remove(&grain);
        if g.grain(grain).is_none() {
            continue;
        }
        let ds_lookup = ds_of.clone();
        let mut requeue: Vec<GrainId> = Vec::new();
        let mut cascade_events: Vec<Event> = Vec::new();
        {
            let s_e_ref = &mut s_e;
            let tracker_ref = &mut tracker;
            let requeue_ref = &mut requeue;
            let events_ref = &mut cascade_events;
            let elimination = topology::eliminate_grain_with(
                &mut g,
                grain,
                &|gid| ds_lookup.get(&gid).copied().unwrap_or(0.0),
                |after, flip| {
                    for consumed in tracker_ref.apply_flip(flip) {
                        s_e_ref.remove(&consumed);
                    }
                    let other = if flip.losing.0 == grain {
                        flip.losing.1
                    } else {
                        flip.losing.0
                    };
                    events_ref.push(Event::Flip {
                        edge: flip.old,
                        new: flip.new,
                        phase: "cascade".into(),
                        key: ds_lookup.get(&other).copied().unwrap_or(0.0),
                    });
                    if after
                        .grain_junctions(other)
                        .map(|r| r.len() == 2)
                        .unwrap_or(false)
                    {
                        requeue_ref.push(other);
                    }
                },
            )?;
            for consumed in tracker_ref.apply_removal(&elimination.removal) {
                s_e_ref.remove(&consumed);
            }
            events_ref.push(Event::Remove {
                grain,
                junctions: elimination.removal.junctions,
                key: key.0,
            });
        }
        log.events.extend(cascade_events);
        if g.grain_count() < 3 {
            return Err(Error::DegenerateCollapse(format!(
                "step {step}: elimination of grain {grain} left fewer than 3 grains"
            )));
        }
        for other in requeue {
            if g.grain(other).is_some() && queued.insert(other) {
                let area = g.grain(other).expect("alive").area;
                queue.insert((AreaKey(area), other));
                log.events.push(Event::Requeue {
                    grain: other,
                    key: area,
                });
            }
        }
    }

    // Remaining edge events in descending probability.
    let mut ordered_events: Vec<((JunctionId, JunctionId), f64)> =
        s_e.iter().map(|(k, p)| (*k, *p)).collect();
    ordered_events.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for (key, p) in ordered_events {
        if !s_e.contains_key(&key) {
            continue; // consumed by an earlier flip in this phase
        }
        let Some(cur) = tracker.current(key) else {
            s_e.remove(&key);
            log.events.push(Event::Skip {
                edge: key,
                key: p,
                reason: "edge no longer exists".into(),
            });
            continue;
        };
        match topology::apply_edge_flip_in_cascade(&mut g, cur.0, cur.1) {
            Ok(flip) => {
                for consumed in tracker.apply_flip(&flip) {
                    s_e.remove(&consumed);
                }
                log.events.push(Event::Flip {
                    edge: cur,
                    new: flip.new,
                    phase: "edge".into(),
                    key: p,
                });
            }
            Err(Error::Input(reason)) | Err(Error::Precondition(reason)) => {
                s_e.remove(&key);
                tracker.drop_current(cur);
                log.events.push(Event::Skip {
                    edge: cur,
                    key: p,
                    reason,
                });
            }
            Err(e) => return Err(e),
        }
    }

    // Sweep: remove grains other events reduced to two sides. A removal can
    // itself shorten a neighbor's ring, so iterate to a fixed point.
    loop {
        let two_sided: Vec<GrainId> = g
            .grain_ids()
            .filter(|&gid| {
                g.grain_junctions(gid)
                    .map(|r| r.len() == 2)
                    .unwrap_or(false)
            })
            .collect();
        if two_sided.is_empty() {
            break;
        }
        for grain in two_sided {
            if g.grain(grain).is_none() || g.grain_junctions(grain)?.len() != 2 {
                continue;
            }
            let removal = topology::remove_grain(&mut g, grain)?;
            for consumed in tracker.apply_removal(&removal) {
                s_e.remove(&consumed);
            }
            log.events.push(Event::Sweep { grain });
            if g.grain_count() < 3 {
                return Err(Error::DegenerateCollapse(format!(
                    "step {step}: sweep left fewer than 3 grains"
                )));
            }
        }
    }

    g.check_core()?;
    let next_features = normalize_features(&g)?;
    Ok((g, next_features, log))
}

// ---------------------------------------------------------------------------
// rollout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrajectoryLayer {
    pub graph: GrainGraph,
    pub features: FeatureSet,
}

/// A rolled-out stack of layers with the realized event logs.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub layers: Vec<TrajectoryLayer>,
    pub dz: f64,
    pub logs: Vec<StepLog>,
}

impl Trajectory {
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Cumulative eliminated-grain count per layer.
    pub fn eliminated_by_layer(&self) -> Vec<usize> {
        let initial = self
            .layers
            .first()
            .map(|l| l.graph.grain_count())
            .unwrap_or(0);
        self.layers
            .iter()
            .map(|l| initial - l.graph.grain_count())
            .collect()
    }
}

/// Rollout result: the trajectory built so far, plus the error that stopped
/// it early if one occurred.
#[derive(Debug)]
pub struct RolloutOutcome {
    pub trajectory: Trajectory,
    pub error: Option<Error>,
}

/// Roll a substrate forward by `n_l - 1` updates of height `dz` each.
pub fn rollout(
    g0: GrainGraph,
    predictor: &dyn Predictor,
    thresholds: &Thresholds,
    n_l: usize,
    dz: f64,
) -> Result<RolloutOutcome> {
    if n_l < 2 {
        return Err(Error::input(format!("rollout needs n_l >= 2, got {n_l}")));
    }
    if !(dz > 0.0 && dz.is_finite()) {
        return Err(Error::input(format!("rollout needs dz > 0, got {dz}")));
    }
    let f0 = normalize_features(&g0)?;
    let mut trajectory = Trajectory {
        layers: vec![TrajectoryLayer {
            graph: g0,
            features: f0,
        }],
        dz,
        logs: Vec::new(),
    };
    for step in 1..n_l {
        let prev = &trajectory.layers[step - 1].graph;
        match update_graph(prev, predictor, thresholds, dz, step) {
            Ok((graph, features, log)) => {
                trajectory.logs.push(log);
                trajectory.layers.push(TrajectoryLayer { graph, features });
            }
            Err(e) => {
                return Ok(RolloutOutcome {
                    trajectory,
                    error: Some(e),
                })
            }
        }
    }
    Ok(RolloutOutcome {
        trajectory,
        error: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::DomainSpec;
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

    /// Zero prediction except scripted area changes and edge probabilities.
    struct Scripted {
        ds: HashMap<GrainId, f64>,
        prob: HashMap<(JunctionId, JunctionId), f64>,
    }

    impl Predictor for Scripted {
        fn predict(&self, _graph: &GrainGraph, features: &FeatureSet) -> Result<Prediction> {
            Ok(Prediction {
                junction_dx: vec![0.0; features.junction_ids.len()],
                junction_dy: vec![0.0; features.junction_ids.len()],
                grain_ds: features
                    .grain_ids
                    .iter()
                    .map(|g| self.ds.get(g).copied().unwrap_or(0.0))
                    .collect(),
                grain_v: vec![0.0; features.grain_ids.len()],
                edge_prob: features
                    .edges
                    .iter()
                    .map(|e| self.prob.get(e).copied().unwrap_or(0.0))
                    .collect(),
            })
        }
    }

    #[test]
    fn identity_update_changes_nothing_topological() {
        let graph = substrate_graph(60, 40);
        let before: Vec<[u32; 3]> = graph.junctions().map(|j| j.triplet).collect();
        let areas: Vec<f64> = graph.grains().map(|g| g.area).collect();
        let (next, _, log) =
            update_graph(&graph, &IdentityPredictor, &Thresholds::default(), 2.4, 1).unwrap();
        let after: Vec<[u32; 3]> = next.junctions().map(|j| j.triplet).collect();
        assert_eq!(before, after);
        assert_eq!(areas, next.grains().map(|g| g.area).collect::<Vec<_>>());
        assert!(log.events.is_empty());
        assert_eq!(next.z_layer(), graph.z_layer() + 2.4);
        for j in next.junctions() {
            assert_eq!(j.delta_pos, Vec2::ZERO);
        }
    }

    #[test]
    fn scripted_elimination_runs_one_flip_and_one_removal() {
        let mut graph = substrate_graph(61, 40);
        // Reduce one grain to three sides with legal flips, then script its
        // area below the elimination threshold.
        let victim = graph
            .grain_ids()
            .find(|&g| graph.grain_junctions(g).unwrap().len() >= 5)
            .unwrap();
        while graph.grain_junctions(victim).unwrap().len() > 3 {
            let faces = topology::boundary_faces(&graph, victim).unwrap();
            let edge = faces
                .iter()
                .find(|(other, _)| graph.grain_junctions(*other).unwrap().len() >= 4)
                .map(|(_, e)| *e)
                .unwrap();
            topology::apply_edge_flip(&mut graph, edge.0, edge.1).unwrap();
        }
        let area = graph.grain(victim).unwrap().area;
        let predictor = Scripted {
            ds: HashMap::from([(victim, (-area).max(-1.0))]),
            prob: HashMap::new(),
        };
        let n_g = graph.grain_count();
        let (next, _, log) =
            update_graph(&graph, &predictor, &Thresholds::default(), 2.4, 1).unwrap();
        assert_eq!(next.grain_count(), n_g - 1);
        assert!(next.grain(victim).is_none());
        assert_eq!(log.flips(), 1);
        assert_eq!(log.removals(), 1);
        assert_eq!(log.sweeps(), 0);
        assert!(next.validate().is_valid());
    }

    #[test]
    fn adjacent_events_apply_in_probability_order() {
        let graph = substrate_graph(62, 40);
        // Two edges sharing a junction, both above threshold; the higher
        // probability flips first and the second applies to the renamed
        // edge that the first flip produced.
        let mut chosen: Option<((u32, u32), (u32, u32))> = None;
        'outer: for (a, b) in graph.edges() {
            for &c in graph.junction_neighbors(b).unwrap() {
                if c == a {
                    continue;
                }
                let e1 = (a, b);
                let e2 = (b.min(c), b.max(c));
                let ok = |e: (u32, u32)| {
                    graph
                        .edge_shared_grains(e.0, e.1)
                        .map(|s| {
                            s.len() == 2
                                && s.iter()
                                    .all(|&g| graph.grain_junctions(g).unwrap().len() >= 5)
                        })
                        .unwrap_or(false)
                };
                if ok(e1) && ok(e2) {
                    chosen = Some((e1, e2));
                    break 'outer;
                }
            }
        }
        let (e1, e2) = chosen.expect("adjacent flippable edges");
        let predictor = Scripted {
            ds: HashMap::new(),
            prob: HashMap::from([(e1, 0.95), (e2, 0.8)]),
        };
        let (next, _, log) =
            update_graph(&graph, &predictor, &Thresholds::default(), 2.4, 1).unwrap();
        let flips: Vec<&Event> = log
            .events
            .iter()
            .filter(|e| matches!(e, Event::Flip { .. }))
            .collect();
        assert_eq!(flips.len(), 2, "log: {:?}", log.events);
        match (flips[0], flips[1]) {
            (Event::Flip { key: k1, .. }, Event::Flip { edge, key: k2, .. }) => {
                assert_eq!(*k1, 0.95);
                assert_eq!(*k2, 0.8);
                // The second flip ran against the post-flip topology: its
                // edge is not the originally scheduled id pair.
                assert_ne!(*edge, e2);
            }
            _ => unreachable!(),
        }
        assert!(next.validate().is_valid());
        assert_eq!(next.grain_count(), graph.grain_count());
    }

    #[test]
    fn contract_violations_are_rejected() {
        struct Bad;
        impl Predictor for Bad {
            fn predict(&self, _g: &GrainGraph, features: &FeatureSet) -> Result<Prediction> {
                Ok(Prediction {
                    junction_dx: vec![2.0; features.junction_ids.len()],
                    junction_dy: vec![0.0; features.junction_ids.len()],
                    grain_ds: vec![0.0; features.grain_ids.len()],
                    grain_v: vec![0.0; features.grain_ids.len()],
                    edge_prob: vec![0.0; features.edges.len()],
                })
            }
        }
        let graph = substrate_graph(63, 20);
        assert!(matches!(
            update_graph(&graph, &Bad, &Thresholds::default(), 2.4, 1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn identity_rollout_is_constant() {
        let graph = substrate_graph(64, 30);
        let outcome = rollout(
            graph.clone(),
            &IdentityPredictor,
            &Thresholds::default(),
            20,
            2.5,
        )
        .unwrap();
        assert!(outcome.error.is_none());
        let traj = outcome.trajectory;
        assert_eq!(traj.layer_count(), 20);
        let t0: Vec<[u32; 3]> = traj.layers[0]
            .graph
            .junctions()
            .map(|j| j.triplet)
            .collect();
        for layer in &traj.layers {
            let t: Vec<[u32; 3]> = layer.graph.junctions().map(|j| j.triplet).collect();
            assert_eq!(t0, t);
        }
        assert!(traj.eliminated_by_layer().iter().all(|&n| n == 0));
        // Heights climb by dz each layer.
        for (l, layer) in traj.layers.iter().enumerate() {
            assert!((layer.graph.z_layer() - l as f64 * 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn baseline_satisfies_symmetry_and_signs() {
        // Unperturbed lattice with the exact hexagonal aspect ratio, so all
        // cells are regular: no displacements, equal probabilities.
        let mut rng = Rng::from_seed(65);
        let spacing = 8.0f64;
        let ly = 6.0 * spacing * 3.0f64.sqrt() / 2.0;
        let domain = DomainSpec::new(40.0, ly, 50.0, 10.0, 2.0, 10.0, 2.0);
        let d0 = spacing / (std::f64::consts::PI / (2.0 * 3.0f64.sqrt())).sqrt();
        let seeds = substrate::hex_perturbed_seeds(&domain, d0, 0.0, &mut rng).unwrap();
        let orientations = vec![[0.0, 0.0, 1.0]; seeds.len()];
        let hex = substrate::periodic_voronoi(&seeds, &orientations, &domain).unwrap();
        let features = normalize_features(&hex).unwrap();
        let pred = BaselinePredictor::default()
            .predict(&hex, &features)
            .unwrap();
        assert!(pred.junction_dx.iter().all(|d| d.abs() < 1e-9));
        assert!(pred.grain_ds.iter().all(|d| d.abs() < 1e-12));
        let p0 = pred.edge_prob[0];
        // Tolerance covers the deterministic anti-degeneracy seed jitter.
        assert!(pred.edge_prob.iter().all(|p| (p - p0).abs() < 1e-6));

        // A five-sided grain among six-or-more-sided ones shrinks.
        let graph = substrate_graph(66, 40);
        let features = normalize_features(&graph).unwrap();
        let pred = BaselinePredictor::default()
            .predict(&graph, &features)
            .unwrap();
        for (i, &gid) in features.grain_ids.iter().enumerate() {
            let sides = graph.grain_junctions(gid).unwrap().len();
            let aligned = graph.grain(gid).unwrap().theta_z.cos();
            let mean_cos =
                graph.grains().map(|g| g.theta_z.cos()).sum::<f64>() / graph.grain_count() as f64;
            if sides < 6 && aligned < mean_cos {
                assert!(pred.grain_ds[i] < 0.0, "grain {gid}");
            }
        }
    }

    #[test]
    fn baseline_rollout_shrinks_monotonically() {
        let graph = substrate_graph(67, 100);
        let outcome = rollout(
            graph,
            &BaselinePredictor::default(),
            &Thresholds::default(),
            20,
            2.5,
        )
        .unwrap();
        assert!(outcome.error.is_none(), "error: {:?}", outcome.error);
        let traj = outcome.trajectory;
        assert_eq!(traj.layer_count(), 20);
        let counts: Vec<usize> = traj.layers.iter().map(|l| l.graph.grain_count()).collect();
        assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{counts:?}");
        assert!(
            *counts.last().unwrap() < counts[0],
            "no coarsening happened: {counts:?}"
        );
        for layer in &traj.layers {
            assert!(layer.graph.check_core().is_ok());
            let report = layer.graph.validate();
            assert!(report.is_valid(), "{:?}", report.violations);
        }
    }

    #[test]
    fn short_rollout_is_rejected() {
        let graph = substrate_graph(68, 20);
        assert!(matches!(
            rollout(graph, &IdentityPredictor, &Thresholds::default(), 1, 2.4),
            Err(Error::Input(_))
        ));
    }
}
