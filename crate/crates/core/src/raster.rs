//! Conversion between grain-index raster images and graphs, and stacking of
//! reconstructed layers into a 3D index field.
//!
//! Extraction follows the junction-pixel rule: a pixel whose eight wrapped
//! neighbors carry exactly three distinct grain indices is a junction
//! candidate; among candidates sharing a triplet the one with the most even
//! neighbor counts wins. Reconstruction draws each grain as the polygon of
//! its junction ring (straight edges; in-plane boundary curvature is
//! deliberately dropped) and resolves overlap and holes deterministically so
//! the output is always a total partition.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{Read, Write};
use std::path::Path;

use crate::domain::DomainSpec;
use crate::error::{Error, Result};
use crate::features::{normalize_features, FeatureSet};
use crate::geometry::{self, Vec2};
use crate::graph::{GrainGraph, GrainId};

pub const GIDX_MAGIC: &[u8; 4] = b"GIDX";
pub const GVOL_MAGIC: &[u8; 4] = b"GVOL";
pub const RASTER_FORMAT_VERSION: u16 = 1;

/// Default reconstruction resolution: pixels per micrometer.
pub const DEFAULT_PIXELS_PER_MICRON: f64 = 12.5;

/// 2D raster of grain indices at one interface height.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexImage {
    pub width: u32,
    pub height: u32,
    /// Row-major grain indices, all > 0.
    pub data: Vec<u32>,
    pub domain: DomainSpec,
    /// Layer height in micrometers.
    pub z_l: f64,
}

impl IndexImage {
    pub fn new(
        width: u32,
        height: u32,
        data: Vec<u32>,
        domain: DomainSpec,
        z_l: f64,
    ) -> Result<Self> {
        if width < 8 || height < 8 {
            return Err(Error::input(format!(
                "index image must be at least 8x8, got {width}x{height}"
            )));
        }
        if data.len() != (width as usize) * (height as usize) {
            return Err(Error::input(format!(
                "data length {} does not match {width}x{height}",
                data.len()
            )));
        }
        if let Some(at) = data.iter().position(|&v| v == 0) {
            return Err(Error::input(format!(
                "pixel {at} has index 0; indices are 1-based"
            )));
        }
        Ok(IndexImage {
            width,
            height,
            data,
            domain,
            z_l,
        })
    }

    #[inline]
    pub fn get(&self, row: u32, col: u32) -> u32 {
        self.data[row as usize * self.width as usize + col as usize]
    }

    #[inline]
    fn get_wrapped(&self, row: i64, col: i64) -> u32 {
        let r = row.rem_euclid(self.height as i64) as usize;
        let c = col.rem_euclid(self.width as i64) as usize;
        self.data[r * self.width as usize + c]
    }

    pub fn pixel_count(&self) -> usize {
        self.data.len()
    }
}

/// Stacked reconstructed layers: voxel (x, y, l) = layer l at (x, y).
#[derive(Debug, Clone, PartialEq)]
pub struct IndexVolume {
    pub width: u32,
    pub height: u32,
    pub depth: u32,
    /// Layer thickness in micrometers.
    pub dz: f64,
    /// depth * height * width indices, layer-major.
    pub data: Vec<u32>,
    pub domain: DomainSpec,
}

impl IndexVolume {
    pub fn layer(&self, l: u32) -> &[u32] {
        let plane = self.width as usize * self.height as usize;
        &self.data[l as usize * plane..(l as usize + 1) * plane]
    }

    /// Physical height spanned by the stack (depth layers of thickness dz).
    pub fn span_z(&self) -> f64 {
        self.depth as f64 * self.dz
    }
}

// ---------------------------------------------------------------------------
// image -> graph
// ---------------------------------------------------------------------------

/// Extract the grain graph and its features from an index image.
pub fn image_to_graph(img: &IndexImage) -> Result<(GrainGraph, FeatureSet)> {
    img.domain.check()?;
    check_connected(img)?;

    let w = img.width as i64;
    let h = img.height as i64;

    // Pixel counts per index double as the grain areas.
    let mut pixel_counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &v in &img.data {
        *pixel_counts.entry(v).or_insert(0) += 1;
    }

    // Best junction pixel per triplet under the evenness rule.
    struct Candidate {
        counts: [u32; 3],
        row: u32,
        col: u32,
    }
    let mut best: HashMap<[u32; 3], Candidate> = HashMap::new();

    for row in 0..h {
        for col in 0..w {
            let mut idx = [0u32; 8];
            let mut k = 0;
            for dr in -1..=1i64 {
                for dc in -1..=1i64 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    idx[k] = img.get_wrapped(row + dr, col + dc);
                    k += 1;
                }
            }
            let mut distinct = idx.to_vec();
            distinct.sort_unstable();
            distinct.dedup();
            match distinct.len() {
                0..=2 => continue,
                3 => {}
                n => {
                    return Err(Error::Degeneracy {
                        row: row as u32,
                        col: col as u32,
                        count: n,
                    })
                }
            }
            let triplet = [distinct[0], distinct[1], distinct[2]];
            let mut counts = [0u32; 3];
            for v in idx {
                let slot = triplet
                    .iter()
                    .position(|&t| t == v)
                    .expect("triplet covers");
                counts[slot] += 1;
            }
            let candidate = Candidate {
                counts,
                row: row as u32,
                col: col as u32,
            };
            match best.get(&triplet) {
                None => {
                    best.insert(triplet, candidate);
                }
                Some(cur) => {
                    // Row-major scan order makes "strictly more even" the
                    // only replacement rule needed: ties keep the earlier
                    // (lower row-major index) pixel.
                    if more_even(&candidate.counts, &cur.counts) {
                        best.insert(triplet, candidate);
                    }
                }
            }
        }
    }

    let mut graph = GrainGraph::new(img.domain);
    graph.set_z_layer(img.z_l);
    let total = img.pixel_count() as f64;
    for (&id, &count) in &pixel_counts {
        // Raster images carry no orientation data; grains default to the
        // z-aligned direction until the caller attaches real orientations.
        graph.add_grain(
            id,
            [0.0, 0.0, 1.0],
            count as f64 / total * img.domain.scale_area(),
            0.0,
            0.0,
        )?;
    }

    let triplets: Vec<[u32; 3]> = {
        let mut t: Vec<_> = best.keys().copied().collect();
        t.sort_unstable();
        t
    };
    let mut pair_map: HashMap<(u32, u32), Vec<u32>> = HashMap::new();
    for triplet in &triplets {
        let c = &best[triplet];
        let pos = Vec2::new(
            (c.col as f64 + 0.5) / img.width as f64,
            (c.row as f64 + 0.5) / img.height as f64,
        );
        let id = graph.add_junction(pos, Vec2::ZERO, *triplet)?;
        for (a, b) in [
            (triplet[0], triplet[1]),
            (triplet[0], triplet[2]),
            (triplet[1], triplet[2]),
        ] {
            pair_map.entry((a, b)).or_default().push(id);
        }
    }

    let mut pairs: Vec<(&(u32, u32), &Vec<u32>)> = pair_map.iter().collect();
    pairs.sort_by_key(|(k, _)| **k);
    for (_, junctions) in pairs {
        for i in 0..junctions.len() {
            for j in i + 1..junctions.len() {
                graph.add_edge(junctions[i], junctions[j])?;
            }
        }
    }

    graph.recompute_centroids();
    fix_isolated_centroids(&mut graph, img);
    let features = normalize_features(&graph)?;
    Ok((graph, features))
}

/// True when `a` is strictly more even than `b`: its descending-sorted
/// neighbor counts are lexicographically smaller, e.g. {3,3,2} beats {4,3,1}.
fn more_even(a: &[u32; 3], b: &[u32; 3]) -> bool {
    let mut sa = *a;
    let mut sb = *b;
    sa.sort_unstable_by(|x, y| y.cmp(x));
    sb.sort_unstable_by(|x, y| y.cmp(x));
    sa < sb
}

/// Grains with no junctions (single-grain images and similar degenerate
/// partitions) get a pixel-mass centroid via the circular mean.
fn fix_isolated_centroids(graph: &mut GrainGraph, img: &IndexImage) {
    use std::f64::consts::TAU;
    let lonely: Vec<GrainId> = graph
        .grain_ids()
        .filter(|&g| {
            graph
                .grain_junctions(g)
                .map(|r| r.is_empty())
                .unwrap_or(false)
        })
        .collect();
    if lonely.is_empty() {
        return;
    }
    let mut acc: HashMap<GrainId, (f64, f64, f64, f64)> =
        lonely.iter().map(|&g| (g, (0.0, 0.0, 0.0, 0.0))).collect();
    for row in 0..img.height {
        for col in 0..img.width {
            let v = img.get(row, col);
            if let Some(e) = acc.get_mut(&v) {
                let ax = TAU * (col as f64 + 0.5) / img.width as f64;
                let ay = TAU * (row as f64 + 0.5) / img.height as f64;
                e.0 += ax.cos();
                e.1 += ax.sin();
                e.2 += ay.cos();
                e.3 += ay.sin();
            }
        }
    }
    for g in lonely {
        let (cx, sx, cy, sy) = acc[&g];
        let x = sx.atan2(cx) / TAU;
        let y = sy.atan2(cy) / TAU;
        if let Some(grain) = graph.grain_mut(g) {
            grain.centroid = Vec2::new(x, y).wrapped();
        }
    }
}

/// Every index must form one connected component under periodic
/// 4-connectivity; otherwise the image is not a valid grain partition.
fn check_connected(img: &IndexImage) -> Result<()> {
    let w = img.width as usize;
    let h = img.height as usize;
    let n = w * h;
    let mut parent: Vec<u32> = (0..n as u32).collect();

    fn find(parent: &mut [u32], mut x: u32) -> u32 {
        while parent[x as usize] != x {
            parent[x as usize] = parent[parent[x as usize] as usize];
            x = parent[x as usize];
        }
        x
    }

    for r in 0..h {
        for c in 0..w {
            let here = r * w + c;
            let right = r * w + (c + 1) % w;
            let down = ((r + 1) % h) * w + c;
            for other in [right, down] {
                if img.data[here] == img.data[other] {
                    let (a, b) = (
                        find(&mut parent, here as u32),
                        find(&mut parent, other as u32),
                    );
                    if a != b {
                        parent[a as usize] = b;
                    }
                }
            }
        }
    }

    let mut root_of_index: HashMap<u32, u32> = HashMap::new();
    for p in 0..n {
        let v = img.data[p];
        let root = find(&mut parent, p as u32);
        match root_of_index.get(&v) {
            None => {
                root_of_index.insert(v, root);
            }
            Some(&r) if r == root => {}
            Some(_) => {
                return Err(Error::Partition(format!(
                    "grain index {v} forms more than one connected component"
                )))
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// graph -> image
// ---------------------------------------------------------------------------

/// Rasterize a graph: each grain becomes the polygon of its junction ring.
/// Pixels claimed by several polygons go to the grain with the nearest
/// periodic centroid; unclaimed pixels flood from their nearest claimed
/// neighbor, so the result is always a total partition.
pub fn graph_to_image(graph: &GrainGraph, width: u32, height: u32) -> Result<IndexImage> {
    if width < 8 || height < 8 {
        return Err(Error::input("reconstruction needs at least 8x8 pixels"));
    }
    let w = width as i64;
    let h = height as i64;
    let n_pix = (width as usize) * (height as usize);
    let mut claim: Vec<u32> = vec![0; n_pix];

    let centroid_of: BTreeMap<GrainId, Vec2> = graph.grains().map(|g| (g.id, g.centroid)).collect();

    let pixel_center = |row: i64, col: i64| {
        Vec2::new(
            (col as f64 + 0.5) / width as f64,
            (row as f64 + 0.5) / height as f64,
        )
    };

    for grain in graph.grains() {
        let ring = graph.grain_ring(grain.id)?;
        if ring.len() < 3 {
            return Err(Error::Reconstruction {
                grain: grain.id,
                reason: format!("junction ring has {} members, need 3", ring.len()),
            });
        }
        // Unwrap the ring into the centroid's periodic image.
        let poly: Vec<Vec2> = ring
            .iter()
            .map(|&j| {
                let p = graph.junction(j).expect("ring junction").pos;
                grain.centroid + geometry::min_image_vec(p, grain.centroid)
            })
            .collect();
        let px: Vec<(f64, f64)> = poly
            .iter()
            .map(|v| (v.x * width as f64, v.y * height as f64))
            .collect();

        let y_min = px.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let y_max = px.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let row_lo = (y_min - 1.0).floor() as i64;
        let row_hi = (y_max + 1.0).ceil() as i64;

        let mut crossings: Vec<f64> = Vec::with_capacity(8);
        for row in row_lo..=row_hi {
            let y = row as f64 + 0.5;
            crossings.clear();
            for i in 0..px.len() {
                let (x1, y1) = px[i];
                let (x2, y2) = px[(i + 1) % px.len()];
                if (y1 <= y) != (y2 <= y) {
                    crossings.push(x1 + (y - y1) * (x2 - x1) / (y2 - y1));
                }
            }
            crossings.sort_by(|a, b| a.partial_cmp(b).expect("finite crossings"));
            for pair in crossings.chunks_exact(2) {
                let col_lo = (pair[0] - 0.5).ceil() as i64;
                let col_hi = (pair[1] - 0.5).ceil() as i64; // exclusive
                for col in col_lo..col_hi {
                    let rw = row.rem_euclid(h) as usize;
                    let cw = col.rem_euclid(w) as usize;
                    let slot = rw * width as usize + cw;
                    let prev = claim[slot];
                    if prev == 0 {
                        claim[slot] = grain.id;
                    } else if prev != grain.id {
                        // Overlapping polygons: nearest periodic centroid
                        // wins; ties go to the lower grain id.
                        let center = pixel_center(rw as i64, cw as i64);
                        let d_new = dist2(center, centroid_of[&grain.id], graph);
                        let d_old = dist2(center, centroid_of[&prev], graph);
                        if d_new < d_old || (d_new == d_old && grain.id < prev) {
                            claim[slot] = grain.id;
                        }
                    }
                }
            }
        }
    }

    // Flood unclaimed pixels from claimed ones, breadth-first and periodic.
    let mut queue: VecDeque<usize> = VecDeque::new();
    for (i, &v) in claim.iter().enumerate() {
        if v != 0 {
            queue.push_back(i);
        }
    }
    if queue.is_empty() {
        return Err(Error::Reconstruction {
            grain: 0,
            reason: "no polygon claimed any pixel".into(),
        });
    }
    while let Some(i) = queue.pop_front() {
        let row = (i / width as usize) as i64;
        let col = (i % width as usize) as i64;
        let v = claim[i];
        for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
            let r = (row + dr).rem_euclid(h) as usize;
            let c = (col + dc).rem_euclid(w) as usize;
            let slot = r * width as usize + c;
            if claim[slot] == 0 {
                claim[slot] = v;
                queue.push_back(slot);
            }
        }
    }

    IndexImage::new(width, height, claim, *graph.domain(), graph.z_layer())
}

fn dist2(p: Vec2, q: Vec2, graph: &GrainGraph) -> f64 {
    let d = geometry::min_image_vec(p, q);
    let dx = d.x * graph.domain().lx;
    let dy = d.y * graph.domain().ly;
    dx * dx + dy * dy
}

// ---------------------------------------------------------------------------
// stacking
// ---------------------------------------------------------------------------

pub fn stack_layers(images: &[IndexImage], dz: f64) -> Result<IndexVolume> {
    let first = images
        .first()
        .ok_or_else(|| Error::input("cannot stack zero layers"))?;
    let mut data = Vec::with_capacity(first.data.len() * images.len());
    for img in images {
        if img.width != first.width || img.height != first.height {
            return Err(Error::input(format!(
                "layer dimensions differ: {}x{} vs {}x{}",
                img.width, img.height, first.width, first.height
            )));
        }
        if img.domain != first.domain {
            return Err(Error::input("layer domains differ"));
        }
        data.extend_from_slice(&img.data);
    }
    Ok(IndexVolume {
        width: first.width,
        height: first.height,
        depth: images.len() as u32,
        dz,
        data,
        domain: first.domain,
    })
}

// ---------------------------------------------------------------------------
// binary formats
// ---------------------------------------------------------------------------

pub fn write_gidx(img: &IndexImage, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(22 + img.data.len() * 4);
    buf.extend_from_slice(GIDX_MAGIC);
    buf.extend_from_slice(&RASTER_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&img.width.to_le_bytes());
    buf.extend_from_slice(&img.height.to_le_bytes());
    buf.extend_from_slice(&img.z_l.to_le_bytes());
    for v in &img.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Read a GIDX file. The on-disk format intentionally carries no domain
/// block; the caller supplies the physical context.
pub fn read_gidx(path: &Path, domain: DomainSpec) -> Result<IndexImage> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor::new(&bytes, path);
    let magic = cur.take(4)?;
    if magic != GIDX_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic bytes, not a GIDX file",
            path.display()
        )));
    }
    let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
    if version != RASTER_FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported GIDX version {version}")));
    }
    let width = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    let height = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    let z_l = f64::from_le_bytes(cur.take(8)?.try_into().unwrap());
    let n = (width as usize) * (height as usize);
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(u32::from_le_bytes(cur.take(4)?.try_into().unwrap()));
    }
    IndexImage::new(width, height, data, domain, z_l)
}

pub fn write_gvol(vol: &IndexVolume, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(26 + vol.data.len() * 4);
    buf.extend_from_slice(GVOL_MAGIC);
    buf.extend_from_slice(&RASTER_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&vol.width.to_le_bytes());
    buf.extend_from_slice(&vol.height.to_le_bytes());
    buf.extend_from_slice(&vol.depth.to_le_bytes());
    buf.extend_from_slice(&vol.dz.to_le_bytes());
    for v in &vol.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_gvol(path: &Path, domain: DomainSpec) -> Result<IndexVolume> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor::new(&bytes, path);
    let magic = cur.take(4)?;
    if magic != GVOL_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic bytes, not a GVOL file",
            path.display()
        )));
    }
    let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
    if version != RASTER_FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported GVOL version {version}")));
    }
    let width = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    let height = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    let depth = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    let dz = f64::from_le_bytes(cur.take(8)?.try_into().unwrap());
    let n = (width as usize) * (height as usize) * (depth as usize);
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(u32::from_le_bytes(cur.take(4)?.try_into().unwrap()));
    }
    Ok(IndexVolume {
        width,
        height,
        depth,
        dz,
        data,
        domain,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Cursor { bytes, at: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: truncated at byte {}",
                self.path.display(),
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }
}
