//! Subcommand implementations.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde_json::json;

use polygrain_core::engine::{
    rollout, GnnPredictor, IdentityPredictor, Predictor, Trajectory, TrajectoryLayer,
};
use polygrain_core::features::normalize_features;
use polygrain_core::gnn;
use polygrain_core::graph::GrainGraph;
use polygrain_core::metrics;
use polygrain_core::raster::{self, IndexImage};
use polygrain_core::rng::Rng;
use polygrain_core::substrate::{self, OrientationSampler, SeedSampler};
use polygrain_core::topology;

use crate::config::{Layering, PredictorConfig, RunConfig, SubstrateSource};

pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub resolution: Option<f64>,
    pub workers: usize,
}

fn out_dir(config: &RunConfig, overrides: &Overrides) -> anyhow::Result<PathBuf> {
    let dir = overrides
        .out
        .clone()
        .unwrap_or_else(|| config.output_dir.clone());
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))?;
    Ok(dir)
}

fn write_provenance(
    dir: &Path,
    command: &str,
    config: &RunConfig,
    seed: u64,
) -> anyhow::Result<()> {
    let doc = json!({
        "command": command,
        "config_hash": config.content_hash(),
        "rng_seed": seed,
        "tool": format!("polygrain {}", env!("CARGO_PKG_VERSION")),
    });
    std::fs::write(
        dir.join("provenance.json"),
        serde_json::to_string_pretty(&doc)?,
    )?;
    Ok(())
}

fn build_substrate(config: &RunConfig, seed: u64) -> anyhow::Result<GrainGraph> {
    let domain = config.domain.normalized_defaults();
    match &config.substrate {
        SubstrateSource::Generate {
            sampler,
            orientation,
        } => {
            let mut rng = Rng::from_seed(seed);
            let seeds = match sampler {
                SeedSampler::HexPerturbed { d0, amplitude } => {
                    substrate::hex_perturbed_seeds(&domain, *d0, *amplitude, &mut rng)?
                }
                SeedSampler::Uniform { n_seeds } => substrate::uniform_seeds(*n_seeds, &mut rng)?,
            };
            let orientations = match orientation {
                OrientationSampler::UniformSphere => {
                    substrate::sample_orientations(seeds.len(), &mut rng)
                }
                OrientationSampler::Peaked {
                    theta0,
                    concentration,
                } => substrate::sample_orientations_peaked(
                    seeds.len(),
                    *theta0,
                    *concentration,
                    &mut rng,
                ),
            };
            Ok(substrate::periodic_voronoi(&seeds, &orientations, &domain)?)
        }
        SubstrateSource::FromGraph { graph_path } => Ok(GrainGraph::read_json(graph_path)?),
        SubstrateSource::FromImage { image_path } => {
            let img = raster::read_gidx(image_path, domain)?;
            let (graph, _) = raster::image_to_graph(&img)?;
            Ok(graph)
        }
    }
}

fn build_predictor(config: &RunConfig) -> anyhow::Result<Box<dyn Predictor>> {
    Ok(match &config.predictor {
        PredictorConfig::Identity => Box::new(IdentityPredictor),
        PredictorConfig::Baseline(params) => Box::new(params.clone()),
        PredictorConfig::Gnn {
            regressor_manifest,
            regressor_blob,
            classifier_manifest,
            classifier_blob,
        } => {
            let regressor = gnn::load_weights(regressor_manifest, regressor_blob)?;
            let classifier = gnn::load_weights(classifier_manifest, classifier_blob)?;
            Box::new(GnnPredictor::new(regressor, classifier)?)
        }
    })
}

fn layering(config: &RunConfig) -> anyhow::Result<(f64, usize)> {
    let domain = config.domain.normalized_defaults();
    match &config.layering {
        Layering::Explicit { n_l, dz } => {
            if *n_l < 2 {
                bail!("layering needs n_l >= 2");
            }
            let dz = dz.unwrap_or(domain.lz / (*n_l as f64 - 1.0));
            Ok((dz, *n_l))
        }
        Layering::Table { table_path } => {
            let table = topology::EliminationTable::read_json(table_path)?;
            Ok(topology::delta_z_policy(&domain, &table)?)
        }
    }
}

fn raster_size(config: &RunConfig, overrides: &Overrides) -> (u32, u32) {
    let ppm = overrides.resolution.unwrap_or(config.resolution);
    let domain = config.domain;
    (
        (domain.lx * ppm).round().max(8.0) as u32,
        (domain.ly * ppm).round().max(8.0) as u32,
    )
}

// ---------------------------------------------------------------------------

pub fn cmd_init(config: &RunConfig, overrides: &Overrides) -> anyhow::Result<()> {
    let dir = out_dir(config, overrides)?;
    let seed = overrides.seed.unwrap_or(config.rng_seed);
    let graph = build_substrate(config, seed)?;
    graph.write_json(&dir.join("substrate.graph"))?;
    let (w, h) = raster_size(config, overrides);
    let image = raster::graph_to_image(&graph, w, h)?;
    raster::write_gidx(&image, &dir.join("substrate.gidx"))?;
    write_provenance(&dir, "init", config, seed)?;
    println!(
        "substrate: {} grains, {} junctions -> {}",
        graph.grain_count(),
        graph.junction_count(),
        dir.display()
    );
    Ok(())
}

pub fn cmd_extract(config: &RunConfig, overrides: &Overrides, input: &Path) -> anyhow::Result<()> {
    let dir = out_dir(config, overrides)?;
    let domain = config.domain.normalized_defaults();
    let img = raster::read_gidx(input, domain)?;
    let (graph, _) = raster::image_to_graph(&img)?;
    let report = graph.validate();
    if !report.is_valid() {
        eprintln!(
            "warning: extracted graph has {} violations",
            report.violations.len()
        );
    }
    graph.write_json(&dir.join("extracted.graph"))?;
    write_provenance(&dir, "extract", config, config.rng_seed)?;
    println!(
        "extracted: {} grains, {} junctions -> {}",
        graph.grain_count(),
        graph.junction_count(),
        dir.display()
    );
    Ok(())
}

pub fn cmd_match(
    config: &RunConfig,
    overrides: &Overrides,
    images: &[PathBuf],
) -> anyhow::Result<()> {
    if images.len() < 2 {
        bail!("match needs at least two images");
    }
    let dir = out_dir(config, overrides)?;
    let domain = config.domain.normalized_defaults();
    let mut graphs = Vec::with_capacity(images.len());
    for path in images {
        let img = raster::read_gidx(path, domain)?;
        let (graph, _) = raster::image_to_graph(&img)?;
        graphs.push(graph);
    }
    let mut records = Vec::with_capacity(graphs.len() - 1);
    for pair in graphs.windows(2) {
        let m = topology::match_graphs(&pair[0], &pair[1])?;
        records.push(topology::training_record(&pair[0], &pair[1], &m)?);
    }
    let path = dir.join("pairs.jsonl");
    topology::write_pair_archive(&records, &path)?;
    write_provenance(&dir, "match", config, config.rng_seed)?;
    println!("{} layer pairs -> {}", records.len(), path.display());
    Ok(())
}

pub fn cmd_evolve(config: &RunConfig, overrides: &Overrides) -> anyhow::Result<()> {
    let dir = out_dir(config, overrides)?;
    let seed = overrides.seed.unwrap_or(config.rng_seed);
    let graph = build_substrate(config, seed)?;
    let predictor = build_predictor(config)?;
    let (dz, n_l) = layering(config)?;
    let outcome = rollout(graph, predictor.as_ref(), &config.thresholds, n_l, dz)?;
    for (l, layer) in outcome.trajectory.layers.iter().enumerate() {
        layer
            .graph
            .write_json(&dir.join(format!("layer_{l:04}.graph")))?;
    }
    polygrain_core::engine::write_event_log(&outcome.trajectory.logs, &dir.join("events.log"))?;
    write_provenance(&dir, "evolve", config, seed)?;
    let last = outcome
        .trajectory
        .layers
        .last()
        .expect("at least one layer");
    println!(
        "trajectory: {} layers at dz = {dz} μm, {} -> {} grains -> {}",
        outcome.trajectory.layer_count(),
        outcome.trajectory.layers[0].graph.grain_count(),
        last.graph.grain_count(),
        dir.display()
    );
    if let Some(err) = outcome.error {
        return Err(err.into());
    }
    Ok(())
}

fn read_trajectory_graphs(dir: &Path) -> anyhow::Result<Vec<GrainGraph>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot read trajectory directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("layer_") && n.ends_with(".graph"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no layer_*.graph files in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| Ok(GrainGraph::read_json(p)?))
        .collect()
}

fn trajectory_from_graphs(graphs: Vec<GrainGraph>) -> anyhow::Result<Trajectory> {
    let dz = if graphs.len() >= 2 {
        graphs[1].z_layer() - graphs[0].z_layer()
    } else {
        graphs[0].dz_prev().max(1.0)
    };
    let layers = graphs
        .into_iter()
        .map(|graph| {
            let features = normalize_features(&graph)?;
            Ok(TrajectoryLayer { graph, features })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(Trajectory {
        layers,
        dz,
        logs: Vec::new(),
    })
}

pub fn cmd_reconstruct(
    config: &RunConfig,
    overrides: &Overrides,
    trajectory: &Path,
) -> anyhow::Result<()> {
    let dir = out_dir(config, overrides)?;
    let graphs = read_trajectory_graphs(trajectory)?;
    let (w, h) = raster_size(config, overrides);
    let dz = if graphs.len() >= 2 {
        graphs[1].z_layer() - graphs[0].z_layer()
    } else {
        graphs[0].dz_prev().max(1.0)
    };

    // Layers are independent; split them across workers.
    let workers = overrides.workers.max(1);
    let mut images: Vec<Option<IndexImage>> = vec![None; graphs.len()];
    std::thread::scope(|scope| -> anyhow::Result<()> {
        let chunk = graphs.len().div_ceil(workers);
        let mut handles = Vec::new();
        for (c, (graph_chunk, image_chunk)) in graphs
            .chunks(chunk)
            .zip(images.chunks_mut(chunk))
            .enumerate()
        {
            handles.push((
                c,
                scope.spawn(move || -> anyhow::Result<()> {
                    for (g, slot) in graph_chunk.iter().zip(image_chunk.iter_mut()) {
                        *slot = Some(raster::graph_to_image(g, w, h)?);
                    }
                    Ok(())
                }),
            ));
        }
        for (_, handle) in handles {
            handle.join().expect("worker panicked")?;
        }
        Ok(())
    })?;
    let images: Vec<IndexImage> = images.into_iter().map(|i| i.expect("filled")).collect();

    for (l, img) in images.iter().enumerate() {
        raster::write_gidx(img, &dir.join(format!("layer_{l:04}.gidx")))?;
    }
    let volume = raster::stack_layers(&images, dz)?;
    raster::write_gvol(&volume, &dir.join("volume.gvol"))?;
    write_provenance(&dir, "reconstruct", config, config.rng_seed)?;
    println!(
        "reconstructed {} layers at {w}x{h} -> {}",
        images.len(),
        dir.display()
    );
    Ok(())
}

pub fn cmd_analyze(
    config: &RunConfig,
    overrides: &Overrides,
    trajectory: &Path,
    reference: Option<&Path>,
) -> anyhow::Result<()> {
    let dir = out_dir(config, overrides)?;
    let traj = trajectory_from_graphs(read_trajectory_graphs(trajectory)?)?;
    let report = metrics::qoi_from_trajectory(&traj, false)?;

    let mut comparison = serde_json::Value::Null;
    if let Some(reference_dir) = reference {
        comparison = compare_with_reference(config, overrides, &traj, &report, reference_dir)?;
    }

    let doc = json!({
        "layers": traj.layer_count(),
        "dz": traj.dz,
        "qoi": report,
        "comparison": comparison,
    });
    std::fs::write(dir.join("qoi.json"), serde_json::to_string_pretty(&doc)?)?;

    // Curves as CSV for plotting.
    let mut csv = String::from("z_l,eliminated,misorientation_deg\n");
    for ((z, n), (_, m)) in report.eliminated.iter().zip(&report.misorientation) {
        csv.push_str(&format!("{z},{n},{m}\n"));
    }
    std::fs::write(dir.join("qoi_curves.csv"), csv)?;
    write_provenance(&dir, "analyze", config, config.rng_seed)?;
    println!(
        "analyzed {} layers: {} eliminations, final misorientation {:.2} deg -> {}",
        traj.layer_count(),
        report.eliminated.last().map(|e| e.1).unwrap_or(0),
        report.misorientation.last().map(|m| m.1).unwrap_or(0.0),
        dir.display()
    );
    Ok(())
}

fn compare_with_reference(
    config: &RunConfig,
    overrides: &Overrides,
    traj: &Trajectory,
    report: &metrics::QoIReport,
    reference_dir: &Path,
) -> anyhow::Result<serde_json::Value> {
    let domain = config.domain.normalized_defaults();
    let mut gidx_paths: Vec<PathBuf> = std::fs::read_dir(reference_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "gidx").unwrap_or(false))
        .collect();
    gidx_paths.sort();

    let mut per_layer = serde_json::Value::Null;
    let (mr_per_layer, reference_sizes) = if gidx_paths.is_empty() {
        // Graph reference: rasterize both sides at the configured size.
        let ref_traj = trajectory_from_graphs(read_trajectory_graphs(reference_dir)?)?;
        let (w, h) = raster_size(config, overrides);
        let n = traj.layer_count().min(ref_traj.layer_count());
        let mut mr = Vec::with_capacity(n);
        for l in 0..n {
            let ours = raster::graph_to_image(&traj.layers[l].graph, w, h)?;
            let theirs = raster::graph_to_image(&ref_traj.layers[l].graph, w, h)?;
            mr.push(metrics::misclassification_rate(&ours, &theirs)?);
        }
        let ref_report = metrics::qoi_from_trajectory(&ref_traj, false)?;
        per_layer = layer_comparisons(traj, &ref_traj)?;
        (mr, ref_report.size_sample())
    } else {
        // Image reference: reconstruct at the reference resolution.
        let n = traj.layer_count().min(gidx_paths.len());
        let mut mr = Vec::with_capacity(n);
        let mut ref_graphs = Vec::with_capacity(n);
        let mut extraction_ok = true;
        for (l, path) in gidx_paths.iter().enumerate().take(n) {
            let reference = raster::read_gidx(path, domain)?;
            let ours =
                raster::graph_to_image(&traj.layers[l].graph, reference.width, reference.height)?;
            mr.push(metrics::misclassification_rate(&reference, &ours)?);
            if extraction_ok {
                match raster::image_to_graph(&reference) {
                    Ok((graph, _)) => ref_graphs.push(graph),
                    Err(e) => {
                        // Pointwise comparison still stands; the size
                        // distribution needs extractable reference images.
                        eprintln!("warning: reference layer {l} not extractable: {e}");
                        extraction_ok = false;
                    }
                }
            }
        }
        let sizes = if extraction_ok && ref_graphs.len() >= 2 {
            let ref_traj = trajectory_from_graphs(ref_graphs)?;
            per_layer = layer_comparisons(traj, &ref_traj)?;
            metrics::qoi_from_trajectory(&ref_traj, false)?.size_sample()
        } else {
            Vec::new()
        };
        (mr, sizes)
    };

    let our_sizes = report.size_sample();
    let ks = if reference_sizes.is_empty() {
        serde_json::Value::Null
    } else {
        let ks = metrics::ks_statistic(&our_sizes, &reference_sizes)?;
        let critical = metrics::ks_critical(0.95, reference_sizes.len(), our_sizes.len())?;
        json!({ "statistic": ks, "critical_95": critical })
    };
    Ok(json!({
        "mr_per_layer": mr_per_layer,
        "ks_grain_size": ks,
        "per_layer": per_layer,
    }))
}

/// Layer-by-layer comparison against a reference trajectory sharing the
/// grain-id namespace: grain-area accuracy, squared-error loss between the
/// realized feature deltas, and event precision/recall.
fn layer_comparisons(
    ours: &Trajectory,
    reference: &Trajectory,
) -> anyhow::Result<serde_json::Value> {
    use std::collections::{BTreeMap, BTreeSet};

    let n = ours.layer_count().min(reference.layer_count());
    let mut area_rrmse = Vec::new();
    let mut delta_l2 = Vec::new();
    let mut event_counts = (0usize, 0usize, 0usize); // tp, ours_total, ref_total
    for l in 0..n {
        let g_ours = &ours.layers[l].graph;
        let g_ref = &reference.layers[l].graph;
        let mut truth = Vec::new();
        let mut pred = Vec::new();
        for grain in g_ref.grains() {
            if let Some(other) = g_ours.grain(grain.id) {
                truth.push(grain.area);
                pred.push(other.area);
            }
        }
        if !truth.is_empty() && truth.iter().any(|a| *a > 0.0) {
            area_rrmse.push(metrics::rrmse(&truth, &pred)?);
        }

        if l + 1 < n {
            let m_ours = topology::match_graphs(g_ours, &ours.layers[l + 1].graph)?;
            let m_ref = topology::match_graphs(g_ref, &reference.layers[l + 1].graph)?;

            // Junction displacements matched across trajectories by triplet.
            let key_of = |g: &polygrain_core::GrainGraph, j: u32| g.junction_triplet(j).ok();
            let ref_delta: BTreeMap<[u32; 3], (f64, f64)> = m_ref
                .junction_delta
                .iter()
                .filter_map(|&(j, dx, dy)| key_of(g_ref, j).map(|k| (k, (dx, dy))))
                .collect();
            let mut tdx = Vec::new();
            let mut tdy = Vec::new();
            let mut pdx = Vec::new();
            let mut pdy = Vec::new();
            for &(j, dx, dy) in &m_ours.junction_delta {
                if let Some(k) = key_of(g_ours, j) {
                    if let Some(&(rx, ry)) = ref_delta.get(&k) {
                        tdx.push(rx);
                        tdy.push(ry);
                        pdx.push(dx);
                        pdy.push(dy);
                    }
                }
            }
            let ref_grain: BTreeMap<u32, (f64, f64)> = m_ref
                .grain_delta
                .iter()
                .map(|&(g, ds, v)| (g, (ds, v)))
                .collect();
            let mut tds = Vec::new();
            let mut tv = Vec::new();
            let mut pds = Vec::new();
            let mut pv = Vec::new();
            for &(g, ds, v) in &m_ours.grain_delta {
                if let Some(&(rds, rv)) = ref_grain.get(&g) {
                    tds.push(rds);
                    tv.push(rv);
                    pds.push(ds);
                    pv.push(v);
                }
            }
            let mask_j = vec![false; tdx.len()];
            let mask_g = vec![false; tds.len()];
            let mut warnings = 0;
            delta_l2.push(metrics::l2_loss(
                &tdx,
                &tdy,
                &pdx,
                &pdy,
                &mask_j,
                &tds,
                &tv,
                &pds,
                &pv,
                &mask_g,
                &mut warnings,
            )?);

            // Events compared by grain signature: eliminations by id, edge
            // events by the grains the flipped edge connected and separated.
            let edge_sig = |g: &polygrain_core::GrainGraph, a: u32, b: u32| -> Option<[u32; 6]> {
                let ta = g.junction_triplet(a).ok()?;
                let tb = g.junction_triplet(b).ok()?;
                let mut all = [ta[0], ta[1], ta[2], tb[0], tb[1], tb[2]];
                all.sort_unstable();
                Some(all)
            };
            let ours_events: BTreeSet<[u32; 6]> = m_ours
                .edge_events
                .iter()
                .filter_map(|&(a, b)| edge_sig(g_ours, a, b))
                .collect();
            let ref_events: BTreeSet<[u32; 6]> = m_ref
                .edge_events
                .iter()
                .filter_map(|&(a, b)| edge_sig(g_ref, a, b))
                .collect();
            let ours_elims: BTreeSet<u32> = m_ours.grain_eliminations.iter().copied().collect();
            let ref_elims: BTreeSet<u32> = m_ref.grain_eliminations.iter().copied().collect();
            event_counts.0 += ours_events.intersection(&ref_events).count()
                + ours_elims.intersection(&ref_elims).count();
            event_counts.1 += ours_events.len() + ours_elims.len();
            event_counts.2 += ref_events.len() + ref_elims.len();
        }
    }
    let (tp, ours_total, ref_total) = event_counts;
    Ok(json!({
        "area_rrmse_percent": area_rrmse,
        "delta_l2": delta_l2,
        "events": {
            "true_positive": tp,
            "predicted": ours_total,
            "reference": ref_total,
            "precision": if ours_total > 0 { Some(tp as f64 / ours_total as f64) } else { None },
            "recall": if ref_total > 0 { Some(tp as f64 / ref_total as f64) } else { None },
        },
    }))
}
