//! Property tests of cross-module invariants.

mod common;

use std::collections::BTreeSet;

use fbfqv::delaunay::triangulate;
use fbfqv::experiment::{ExperimentConfig, ExperimentKind};
use fbfqv::normality::{ks_two_sample, summarize};
use fbfqv::pointprocess::PointConfiguration;
use fbfqv::qvstats::{tilde_increments, v3_quadratic_form};
use fbfqv::typical::{typical_edge_cdf, DEFAULT_QUADRATURE_SIZE};
use fbfqv::varints::{neighbor_bound, neighbor_bound_proof};
use proptest::prelude::*;

fn int_points(max_len: usize) -> impl Strategy<Value = Vec<common::IPoint>> {
    proptest::collection::btree_set((0i64..1 << 12, 0i64..1 << 12), 4..max_len)
        .prop_map(|s| s.into_iter().map(|(x, y)| [x, y]).collect::<Vec<_>>())
        .prop_shuffle()
}

fn config_of(pts: &[common::IPoint]) -> PointConfiguration {
    PointConfiguration::from_points(pts.iter().map(|&p| common::to_point(p)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn triangulation_matches_brute_force(pts in int_points(14)) {
        prop_assume!(common::in_general_position(&pts));
        let tri = triangulate(&config_of(&pts)).unwrap();
        prop_assert_eq!(common::normalized_edges(tri.edges()), common::brute_force_edges(&pts));
    }

    #[test]
    fn circumdisks_are_empty_even_with_degeneracies(pts in int_points(40)) {
        // Small integer grids produce many collinear and cocircular sets.
        let coarse: Vec<common::IPoint> = pts.iter().map(|p| [p[0] % 9, p[1] % 9]).collect::<BTreeSet<_>>().into_iter().collect();
        prop_assume!(coarse.len() >= 3);
        prop_assume!((2..coarse.len()).any(|k| common::orient(coarse[0], coarse[1], coarse[k]) != 0));
        let tri = triangulate(&config_of(&coarse)).unwrap();
        prop_assert!(common::circumdisk_violations(&coarse, tri.triangles()).is_empty());
    }

    #[test]
    fn edge_set_does_not_depend_on_insertion_order(pts in int_points(30), rot in 0usize..30) {
        let rot = rot % pts.len();
        let mut rotated = pts.clone();
        rotated.rotate_left(rot);
        let coords = |p: &[common::IPoint], e: &[(usize, usize)]| -> BTreeSet<(common::IPoint, common::IPoint)> {
            e.iter().map(|&(a, b)| (p[a].min(p[b]), p[a].max(p[b]))).collect()
        };
        let a = triangulate(&config_of(&pts)).unwrap();
        let b = triangulate(&config_of(&rotated)).unwrap();
        // Only general-position inputs have a unique triangulation.
        if common::in_general_position(&pts) {
            prop_assert_eq!(coords(&pts, a.edges()), coords(&rotated, b.edges()));
        } else {
            prop_assert_eq!(a.triangles().len(), b.triangles().len());
        }
    }

    #[test]
    fn orthogonalized_terms_equal_quadratic_form(u12 in -6.0f64..6.0, u13 in -6.0f64..6.0, r in -0.99f64..0.99) {
        let (a, b) = tilde_increments(u12, u13, r).unwrap();
        let lhs = (a * a - 1.0) + (b * b - 1.0);
        let rhs = v3_quadratic_form(u12, u13, r);
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn summary_ignores_order(mut v in proptest::collection::vec(-1e3f64..1e3, 2..200), seed in any::<u64>()) {
        let s1 = summarize(&v).unwrap();
        let k = (seed as usize) % v.len();
        v.rotate_left(k);
        v.reverse();
        let s2 = summarize(&v).unwrap();
        prop_assert!((s1.mean - s2.mean).abs() <= 1e-9 * (1.0 + s1.mean.abs()));
        prop_assert!((s1.variance - s2.variance).abs() <= 1e-9 * (1.0 + s1.variance));
    }

    #[test]
    fn two_sample_distance_is_a_symmetric_fraction(
        a in proptest::collection::vec(-5.0f64..5.0, 1..60),
        b in proptest::collection::vec(-5.0f64..5.0, 1..60),
    ) {
        let d = ks_two_sample(&a, &b);
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, ks_two_sample(&b, &a));
        prop_assert_eq!(ks_two_sample(&a, &a), 0.0);
    }

    #[test]
    fn edge_cdf_is_monotone(l1 in 0.0f64..4.0, dl in 0.0f64..2.0) {
        let f1 = typical_edge_cdf(l1, DEFAULT_QUADRATURE_SIZE);
        let f2 = typical_edge_cdf(l1 + dl, DEFAULT_QUADRATURE_SIZE);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&f1));
        prop_assert!(f2 >= f1 - 1e-14);
    }

    #[test]
    fn proof_bound_is_tighter_beyond_unit_radius(r in 0.05f64..6.0) {
        let (proof, displayed) = (neighbor_bound_proof(r), neighbor_bound(r));
        if r >= 1.0 {
            prop_assert!(proof <= displayed * (1.0 + 1e-12));
        } else {
            prop_assert!(proof >= displayed);
        }
    }

    #[test]
    fn config_round_trips_through_json(
        hurst in 0.01f64..0.99,
        side in 1.0f64..500.0,
        reps in 1usize..10_000,
        seed in any::<u64>(),
        margin in proptest::option::of(0.0f64..50.0),
    ) {
        let mut c = ExperimentConfig::new(ExperimentKind::CltV3);
        c.hurst = hurst;
        c.anchor_side = side;
        c.replicates = reps;
        c.master_seed = seed;
        c.margin = margin;
        let text = serde_json::to_string(&c).unwrap();
        let back = ExperimentConfig::from_json(&text).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.sha256().unwrap(), c.sha256().unwrap());
    }
}
