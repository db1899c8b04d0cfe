//! Shared fixtures for the benchmark suite.

use polygrain_core::graph::GrainGraph;
use polygrain_core::rng::Rng;
use polygrain_core::{substrate, DomainSpec};

pub fn domain(side: f64) -> DomainSpec {
    DomainSpec::new(side, side, 50.0, 10.0, 2.0, 10.0, 2.0).with_reference(40.0, 40.0, 50.0)
}

/// Perturbed hexagonal substrate with roughly `target` grains.
pub fn hex_substrate(target: usize, seed: u64) -> GrainGraph {
    let side = 40.0 * (target as f64 / 120.0).sqrt();
    let d = domain(side.max(20.0));
    let mut rng = Rng::from_seed(seed);
    let seeds = substrate::hex_perturbed_seeds(&d, 4.1, 0.1, &mut rng).expect("lattice fits");
    let orientations = substrate::sample_orientations(seeds.len(), &mut rng);
    substrate::periodic_voronoi(&seeds, &orientations, &d).expect("tessellation")
}
