//! Property tests for the engine-wide invariants.

use proptest::prelude::*;

use polygrain_core::engine::{rollout, BaselinePredictor, Thresholds};
use polygrain_core::features::{denormalize_features, normalize_features};
use polygrain_core::geometry::{min_image, wrap_unit};
use polygrain_core::graph::GrainGraph;
use polygrain_core::metrics::ks_statistic;
use polygrain_core::rng::Rng;
use polygrain_core::substrate;
use polygrain_core::topology;
use polygrain_core::DomainSpec;

fn voronoi(seed: u64, n: usize, lx: f64, ly: f64) -> GrainGraph {
    let domain =
        DomainSpec::new(lx, ly, 50.0, 10.0, 2.0, 10.0, 2.0).with_reference(40.0, 40.0, 50.0);
    let mut rng = Rng::from_seed(seed);
    let seeds = substrate::uniform_seeds(n, &mut rng).unwrap();
    let orientations = substrate::sample_orientations(n, &mut rng);
    substrate::periodic_voronoi(&seeds, &orientations, &domain).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wrapping_stays_in_range(x in -1e6f64..1e6) {
        let w = wrap_unit(x);
        prop_assert!((0.0..1.0).contains(&w));
        let m = min_image(x);
        prop_assert!((-0.5..=0.5).contains(&m));
        // Wrapping the wrap is the identity.
        prop_assert_eq!(wrap_unit(w), w);
    }

    #[test]
    fn min_image_is_antisymmetric(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let d1 = min_image(a - b);
        let d2 = min_image(b - a);
        // Equal magnitude; sign flips except at the ambiguous half point.
        prop_assert!((d1.abs() - d2.abs()).abs() < 1e-12);
    }

    #[test]
    fn ks_is_symmetric_and_bounded(
        a in prop::collection::vec(-10.0f64..10.0, 1..40),
        b in prop::collection::vec(-10.0f64..10.0, 1..40),
    ) {
        let ab = ks_statistic(&a, &b).unwrap();
        let ba = ks_statistic(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ks_statistic(&a, &a).unwrap(), 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn features_round_trip_to_physical(seed in 0u64..1000, n in 8usize..24) {
        let graph = voronoi(seed, n, 40.0, 40.0);
        let features = normalize_features(&graph).unwrap();
        let phys = denormalize_features(&features, graph.domain()).unwrap();
        for (i, &jid) in features.junction_ids.iter().enumerate() {
            let j = graph.junction(jid).unwrap();
            prop_assert!((phys.junction[i][0] - j.pos.x * 40.0).abs() < 1e-12);
            prop_assert!((phys.junction[i][1] - j.pos.y * 40.0).abs() < 1e-12);
        }
        for (i, &gid) in features.grain_ids.iter().enumerate() {
            let g = graph.grain(gid).unwrap();
            prop_assert!((phys.grain[i][3] - g.area * 1600.0).abs() < 1e-9);
        }
    }

    #[test]
    fn serialization_is_a_fixed_point(seed in 0u64..1000, n in 8usize..24) {
        let graph = voronoi(seed, n, 40.0, 40.0);
        let text = graph.to_json_string().unwrap();
        let back = GrainGraph::from_json_str(&text).unwrap();
        prop_assert_eq!(text, back.to_json_string().unwrap());
    }

    #[test]
    fn legal_flips_preserve_triplet_multisets_under_involution(
        seed in 0u64..500,
        pick in 0usize..64,
    ) {
        let graph = voronoi(seed, 25, 40.0, 40.0);
        let legal: Vec<(u32, u32)> = graph
            .edges()
            .filter(|&(a, b)| {
                graph
                    .edge_shared_grains(a, b)
                    .map(|s| {
                        s.len() == 2
                            && s.iter().all(|&g| graph.grain_junctions(g).unwrap().len() >= 4)
                    })
                    .unwrap_or(false)
            })
            .collect();
        prop_assume!(!legal.is_empty());
        let (a, b) = legal[pick % legal.len()];
        let mut mutated = graph.clone();
        let flip = topology::apply_edge_flip(&mut mutated, a, b).unwrap();
        prop_assert_eq!(mutated.jj_edge_count(), graph.jj_edge_count());
        topology::apply_edge_flip(&mut mutated, flip.new.0, flip.new.1).unwrap();
        let mut before: Vec<[u32; 3]> = graph.junctions().map(|j| j.triplet).collect();
        let mut after: Vec<[u32; 3]> = mutated.junctions().map(|j| j.triplet).collect();
        before.sort_unstable();
        after.sort_unstable();
        prop_assert_eq!(before, after);
    }
}

/// Fixed-seed rollout property: every layer of a coarsening run keeps the
/// structural relations intact.
#[test]
fn baseline_rollouts_keep_the_count_relations() {
    for seed in [5u64, 17, 29] {
        let graph = voronoi(seed, 80, 40.0, 40.0);
        let outcome = rollout(
            graph,
            &BaselinePredictor::default(),
            &Thresholds::default(),
            10,
            2.5,
        )
        .unwrap();
        assert!(outcome.error.is_none(), "seed {seed}: {:?}", outcome.error);
        for layer in &outcome.trajectory.layers {
            let g = &layer.graph;
            assert_eq!(g.junction_count(), 2 * g.grain_count());
            assert_eq!(g.jj_edge_count(), 3 * g.grain_count());
            for j in g.junction_ids().collect::<Vec<_>>() {
                assert_eq!(g.junction_neighbors(j).unwrap().len(), 3);
            }
        }
    }
}
