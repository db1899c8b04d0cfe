//! Initial-substrate generation: seed sampling, crystallographic orientation
//! sampling, and periodic Voronoi tessellation into a [`GrainGraph`].
//!
//! The tessellation replicates the seeds into a (2r+1)x(2r+1) tiling,
//! triangulates the copies, and keeps one canonical representative per torus
//! Voronoi vertex (the circumcenter that lands in the central unit cell).
//! Triangle identity across copies is decided by exact integer bookkeeping
//! on (seed index, image shift) triples, never by coordinate comparison.

use std::collections::BTreeMap;

use delaunator::{triangulate, Point, EMPTY};
use serde::{Deserialize, Serialize};

use crate::domain::DomainSpec;
use crate::error::{Error, Result};
use crate::geometry::{self, Vec2};
use crate::graph::{GrainGraph, JunctionId};
use crate::rng::{splitmix64, Rng};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedSampler {
    /// Hexagonal lattice of grain seeds with mean equivalent diameter `d0`
    /// (μm), each seed displaced by `amplitude * lx * eta` with standard
    /// Gaussian `eta` per component.
    HexPerturbed { d0: f64, amplitude: f64 },
    /// `n_seeds` points drawn uniformly over the domain.
    Uniform { n_seeds: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OrientationSampler {
    /// Growth directions uniform on the unit sphere.
    #[default]
    UniformSphere,
    /// Unit-sphere draws re-weighted toward a dominant misorientation angle
    /// `theta0` (radians from the z-axis); `concentration` controls how
    /// sharply the mode is preferred. Only the mode is calibrated.
    Peaked { theta0: f64, concentration: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubstrateSpec {
    pub domain: DomainSpec,
    pub sampler: SeedSampler,
    #[serde(default)]
    pub orientation: OrientationSampler,
    pub rng_seed: u64,
}

impl SubstrateSpec {
    pub fn check(&self) -> Result<()> {
        self.domain.check()?;
        match &self.sampler {
            SeedSampler::HexPerturbed { d0, amplitude } => {
                if *d0 <= 0.0 {
                    return Err(Error::config("hex sampler requires d0 > 0"));
                }
                if !(0.0..0.5).contains(amplitude) {
                    return Err(Error::config("hex amplitude must be in [0, 0.5)"));
                }
            }
            SeedSampler::Uniform { n_seeds } => {
                if *n_seeds < 2 {
                    return Err(Error::config("uniform sampler requires n_seeds >= 2"));
                }
            }
        }
        Ok(())
    }
}

/// Draw `n` unit vectors uniformly over the sphere via normalized Gaussians.
pub fn sample_orientations(n: usize, rng: &mut Rng) -> Vec<[f64; 3]> {
    (0..n).map(|_| unit_sphere_draw(rng)).collect()
}

/// Unit-sphere draws biased so the misorientation angle to the z-axis peaks
/// at `theta0`, by rejection with weight exp(c (cos(θz − θ0) − 1)).
pub fn sample_orientations_peaked(
    n: usize,
    theta0: f64,
    concentration: f64,
    rng: &mut Rng,
) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| loop {
            let d = unit_sphere_draw(rng);
            let theta_z = d[2].clamp(-1.0, 1.0).acos();
            let w = (concentration * ((theta_z - theta0).cos() - 1.0)).exp();
            if rng.uniform() < w {
                return d;
            }
        })
        .collect()
}

fn unit_sphere_draw(rng: &mut Rng) -> [f64; 3] {
    loop {
        let d = [rng.gaussian(), rng.gaussian(), rng.gaussian()];
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if norm > 1e-6 {
            return [d[0] / norm, d[1] / norm, d[2] / norm];
        }
    }
}

/// Hexagonal seed lattice with mean equivalent grain diameter `d0`, Gaussian
/// perturbation, wrapped to the unit cell. Row and column counts are rounded
/// so the lattice tiles the torus (even row count).
pub fn hex_perturbed_seeds(
    domain: &DomainSpec,
    d0: f64,
    amplitude: f64,
    rng: &mut Rng,
) -> Result<Vec<Vec2>> {
    // Hexagonal cell of side-spacing a has area (sqrt(3)/2) a^2; match it to
    // the circle of diameter d0.
    let spacing = d0 * (std::f64::consts::PI / (2.0 * 3.0f64.sqrt())).sqrt();
    let nx = (domain.lx / spacing).round() as i64;
    let row_h = spacing * 3.0f64.sqrt() / 2.0;
    let ny = (((domain.ly / row_h) / 2.0).round() * 2.0) as i64;
    if nx < 2 || ny < 2 {
        return Err(Error::config(format!(
            "domain {}x{} μm too small for a hexagonal lattice of d0 = {d0} μm",
            domain.lx, domain.ly
        )));
    }
    let (nx, ny) = (nx as usize, ny as usize);
    let mut seeds = Vec::with_capacity(nx * ny);
    for row in 0..ny {
        let offset = if row % 2 == 1 { 0.5 } else { 0.0 };
        let y = (row as f64 + 0.5) / ny as f64;
        for col in 0..nx {
            let x = (col as f64 + 0.5 + offset) / nx as f64;
            let dx = amplitude * rng.gaussian();
            let dy = amplitude * rng.gaussian() * domain.lx / domain.ly;
            seeds.push(Vec2::new(x + dx, y + dy).wrapped());
        }
    }
    Ok(seeds)
}

pub fn uniform_seeds(n_seeds: usize, rng: &mut Rng) -> Result<Vec<Vec2>> {
    if n_seeds < 2 {
        return Err(Error::config("need at least 2 seeds"));
    }
    Ok((0..n_seeds)
        .map(|_| Vec2::new(rng.uniform(), rng.uniform()))
        .collect())
}

/// Generate a substrate graph from a spec: seeds, orientations, tessellation.
pub fn generate(spec: &SubstrateSpec) -> Result<GrainGraph> {
    spec.check()?;
    let mut rng = Rng::from_seed(spec.rng_seed);
    let seeds = match &spec.sampler {
        SeedSampler::HexPerturbed { d0, amplitude } => {
            hex_perturbed_seeds(&spec.domain, *d0, *amplitude, &mut rng)?
        }
        SeedSampler::Uniform { n_seeds } => uniform_seeds(*n_seeds, &mut rng)?,
    };
    let orientations = match &spec.orientation {
        OrientationSampler::UniformSphere => sample_orientations(seeds.len(), &mut rng),
        OrientationSampler::Peaked {
            theta0,
            concentration,
        } => sample_orientations_peaked(seeds.len(), *theta0, *concentration, &mut rng),
    };
    periodic_voronoi(&seeds, &orientations, &spec.domain)
}

/// Periodic Voronoi tessellation of normalized seed points into a grain
/// graph. One grain per seed; junctions are the Voronoi vertices of the
/// torus; every junction is triple. Cocircular degeneracies are broken by a
/// deterministic per-index jitter and never surface to the caller.
pub fn periodic_voronoi(
    seeds: &[Vec2],
    orientations: &[[f64; 3]],
    domain: &DomainSpec,
) -> Result<GrainGraph> {
    domain.check()?;
    let n = seeds.len();
    if n < 2 {
        return Err(Error::input("periodic Voronoi needs at least 2 seeds"));
    }
    if orientations.len() != n {
        return Err(Error::input(format!(
            "{} orientations for {} seeds",
            orientations.len(),
            n
        )));
    }

    let base_radius: i64 = if n < 8 { 2 } else { 1 };
    let mut last_err = None;
    for attempt in 0..3 {
        let jitter = 1e-9 * 100f64.powi(attempt);
        let jittered = jittered_seeds(seeds, jitter)?;
        for radius in base_radius..=base_radius + 1 {
            match tessellate(&jittered, orientations, domain, radius) {
                Ok(graph) => return Ok(graph),
                Err(e @ Error::Input(_)) => return Err(e),
                Err(e) => last_err = Some(e),
            }
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Numeric("tessellation failed".into())))
}

fn jittered_seeds(seeds: &[Vec2], scale: f64) -> Result<Vec<Vec2>> {
    // Coincident inputs are the caller's mistake; the jitter only exists to
    // break cocircular ties and must not paper over duplicates.
    let mut sorted: Vec<(f64, f64, usize)> = seeds
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let w = p.wrapped();
            (w.x, w.y, i)
        })
        .collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    for w in sorted.windows(2) {
        if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
            return Err(Error::input(format!(
                "duplicate seeds at indices {} and {}",
                w[0].2, w[1].2
            )));
        }
    }
    let mut out = Vec::with_capacity(seeds.len());
    for (i, s) in seeds.iter().enumerate() {
        let mut state = (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xD1B5_4A32_D192_ED03;
        let u1 = (splitmix64(&mut state) >> 11) as f64 / (1u64 << 53) as f64;
        let u2 = (splitmix64(&mut state) >> 11) as f64 / (1u64 << 53) as f64;
        out.push(
            Vec2::new(
                s.x + scale * (2.0 * u1 - 1.0),
                s.y + scale * (2.0 * u2 - 1.0),
            )
            .wrapped(),
        );
    }
    Ok(out)
}

/// Canonical identity of a torus triangle: (seed, image shift) triples sorted
/// and re-based on the first entry's shift. Image copies of one torus
/// triangle produce identical keys.
type TriKey = [(u32, i32, i32); 3];

fn tessellate(
    seeds: &[Vec2],
    orientations: &[[f64; 3]],
    domain: &DomainSpec,
    radius: i64,
) -> Result<GrainGraph> {
    let n = seeds.len();
    let span = 2 * radius + 1;
    // Tessellate in physical aspect so the Euclidean metric is honest on
    // anisotropic domains; coordinates map back to [0,1) afterwards.
    let (lx, ly) = (domain.lx, domain.ly);
    let mut points = Vec::with_capacity((span * span) as usize * n);
    for oy in -radius..=radius {
        for ox in -radius..=radius {
            for s in seeds {
                points.push(Point {
                    x: (s.x + ox as f64) * lx,
                    y: (s.y + oy as f64) * ly,
                });
            }
        }
    }
    let block_of = |p: usize| p / n;
    let base_of = |p: usize| (p % n) as u32;
    let shift_of = |p: usize| {
        let b = block_of(p) as i64;
        ((b % span - radius) as i32, (b / span - radius) as i32)
    };

    let tri = triangulate(&points);
    if tri.triangles.is_empty() {
        return Err(Error::Numeric("degenerate seed configuration".into()));
    }
    let n_tris = tri.triangles.len() / 3;

    let tri_key = |t: usize| -> TriKey {
        let mut items: [(u32, i32, i32); 3] = std::array::from_fn(|k| {
            let p = tri.triangles[3 * t + k];
            let (sx, sy) = shift_of(p);
            (base_of(p), sx, sy)
        });
        items.sort_unstable();
        let (_, bx, by) = items[0];
        for item in &mut items {
            item.1 -= bx;
            item.2 -= by;
        }
        items
    };

    let circumcenter_of = |t: usize| -> Result<Vec2> {
        let a = &points[tri.triangles[3 * t]];
        let b = &points[tri.triangles[3 * t + 1]];
        let c = &points[tri.triangles[3 * t + 2]];
        geometry::circumcenter(
            Vec2::new(a.x, a.y),
            Vec2::new(b.x, b.y),
            Vec2::new(c.x, c.y),
        )
        .ok_or_else(|| Error::Numeric("degenerate triangle in tessellation".into()))
    };

    // One canonical triangle per torus Voronoi vertex: the copy whose
    // circumcenter falls in the central unit cell.
    let mut canonical: BTreeMap<TriKey, (usize, Vec2)> = BTreeMap::new();
    for t in 0..n_tris {
        let raw = circumcenter_of(t)?;
        let cc = Vec2::new(raw.x / lx, raw.y / ly);
        if (0.0..1.0).contains(&cc.x) && (0.0..1.0).contains(&cc.y) {
            let key = tri_key(t);
            if canonical.insert(key, (t, cc)).is_some() {
                return Err(Error::Numeric(
                    "inconsistent triangulation across image copies".into(),
                ));
            }
        }
    }
    if canonical.len() != 2 * n {
        return Err(Error::Numeric(format!(
            "expected {} torus Voronoi vertices, found {}",
            2 * n,
            canonical.len()
        )));
    }

    let mut graph = GrainGraph::new(*domain);
    for (i, d) in orientations.iter().enumerate() {
        graph.add_grain((i + 1) as u32, *d, 0.0, 0.0, 0.0)?;
    }

    let mut junction_of: BTreeMap<TriKey, JunctionId> = BTreeMap::new();
    let mut tri_to_junction: Vec<Option<JunctionId>> = vec![None; n_tris];
    for (key, (t, cc)) in &canonical {
        let mut triplet = [0u32; 3];
        for (k, item) in key.iter().enumerate() {
            triplet[k] = item.0 + 1;
        }
        let id = graph.add_junction(*cc, Vec2::ZERO, triplet)?;
        junction_of.insert(*key, id);
        tri_to_junction[*t] = Some(id);
    }

    let next_halfedge = |e: usize| if e % 3 == 2 { e - 2 } else { e + 1 };

    // A torus Voronoi edge is dual to one torus Delaunay edge; identify it by
    // the canonical (seed, shift) pair so parallel boundary edges (one cell
    // touching another along two arcs, real topology on few-grain tori) are
    // counted with their multiplicity.
    let edge_key = |e: usize| -> EdgeKey {
        let pa = tri.triangles[e];
        let pb = tri.triangles[next_halfedge(e)];
        let (ax, ay) = shift_of(pa);
        let (bx, by) = shift_of(pb);
        let mut items = [(base_of(pa), ax, ay), (base_of(pb), bx, by)];
        items.sort_unstable();
        let (_, rx, ry) = items[0];
        for item in &mut items {
            item.1 -= rx;
            item.2 -= ry;
        }
        items
    };

    type EdgeKey = [(u32, i32, i32); 2];
    let mut edges: BTreeMap<EdgeKey, (JunctionId, JunctionId)> = BTreeMap::new();
    for (key, (t, _)) in &canonical {
        let ja = junction_of[key];
        for k in 0..3 {
            let he = 3 * t + k;
            let opp = tri.halfedges[he];
            if opp == EMPTY {
                return Err(Error::Numeric("tiling too small: hull reached".into()));
            }
            let t2 = opp / 3;
            let jb = match tri_to_junction[t2] {
                Some(j) => j,
                None => *junction_of.get(&tri_key(t2)).ok_or_else(|| {
                    Error::Numeric("tiling too small: neighbor triangle missing".into())
                })?,
            };
            if ja == jb {
                return Err(Error::Numeric(
                    "degenerate self-adjacent Voronoi cell".into(),
                ));
            }
            let pair = (ja.min(jb), ja.max(jb));
            if let Some(prev) = edges.insert(edge_key(he), pair) {
                if prev != pair {
                    return Err(Error::Numeric(
                        "inconsistent edge resolution across image copies".into(),
                    ));
                }
            }
        }
    }
    if edges.len() != 3 * n {
        return Err(Error::Numeric(format!(
            "expected {} boundary edges, found {}",
            3 * n,
            edges.len()
        )));
    }
    for &(a, b) in edges.values() {
        graph.insert_edge_entry(a, b)?;
    }

    // Cell polygons around the central copy of each seed give exact areas.
    let mut outgoing = vec![usize::MAX; points.len()];
    for e in 0..tri.triangles.len() {
        outgoing[tri.triangles[e]] = e;
    }
    let center_block = (radius * span + radius) as usize;
    let mut total = 0.0;
    for i in 0..n {
        let p = center_block * n + i;
        let e0 = outgoing[p];
        if e0 == usize::MAX {
            return Err(Error::Numeric(format!("seed {i} not in triangulation")));
        }
        let mut poly = Vec::new();
        let mut e = e0;
        for step in 0..1024 {
            if step == 1023 {
                return Err(Error::Numeric("unterminated cell walk".into()));
            }
            poly.push(circumcenter_of(e / 3)?);
            let incoming = tri.halfedges[e];
            if incoming == EMPTY {
                return Err(Error::Numeric("tiling too small: open cell".into()));
            }
            e = next_halfedge(incoming);
            debug_assert_eq!(tri.triangles[e], p);
            if e == e0 {
                break;
            }
        }
        let frac = geometry::polygon_area(&poly).abs() / (lx * ly);
        total += frac;
        graph.grain_mut((i + 1) as u32).expect("grain exists").area = frac * domain.scale_area();
    }
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Numeric(format!(
            "cell areas sum to {total}, expected 1"
        )));
    }

    graph.recompute_centroids();
    Ok(graph)
}
