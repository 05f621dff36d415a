mod common;

use common::{brute_force_precision_recall, flatten, hand_placed_sets};
use maskgen_core::metrics::{frechet_distance, inception_score_analog, precision_recall};
use proptest::prelude::*;

#[test]
fn hand_placed_sets_match_the_exhaustive_oracle() {
    let (real, generated) = hand_placed_sets();
    assert_eq!((real.len(), generated.len()), (20, 20));
    for k in 1..=5 {
        let expected = brute_force_precision_recall(&real, &generated, k);
        let got = precision_recall(&flatten(&real), &flatten(&generated), 2, k).unwrap();
        assert_eq!(got, expected, "k={k}");
    }
    // far generated points have wide balls, so only precision is partial
    let (p, r) = precision_recall(&flatten(&real), &flatten(&generated), 2, 3).unwrap();
    assert!(p > 0.0 && p < 1.0, "{p}");
    assert_eq!(r, 1.0);
}

fn lattice_points(n: usize) -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec((-6i32..6, -6i32..6).prop_map(|(x, y)| [x as f64, y as f64]), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_lattice_sets_match_the_oracle(real in lattice_points(20), generated in lattice_points(20), k in 1usize..6) {
        let expected = brute_force_precision_recall(&real, &generated, k);
        let got = precision_recall(&flatten(&real), &flatten(&generated), 2, k).unwrap();
        prop_assert_eq!(got, expected);
    }

    #[test]
    fn precision_recall_ignore_ordering(real in lattice_points(15), generated in lattice_points(12), rot_a in 0usize..15, rot_b in 0usize..12) {
        let base = precision_recall(&flatten(&real), &flatten(&generated), 2, 3).unwrap();
        let mut r2 = real.clone();
        r2.rotate_left(rot_a);
        r2.reverse();
        let mut g2 = generated.clone();
        g2.rotate_left(rot_b);
        prop_assert_eq!(precision_recall(&flatten(&r2), &flatten(&g2), 2, 3).unwrap(), base);
    }

    #[test]
    fn frechet_distance_of_a_set_with_itself_vanishes(points in prop::collection::vec(-5.0f64..5.0, 3 * 40)) {
        prop_assert!(frechet_distance(&points, &points, 3).unwrap() < 1e-6);
    }

    #[test]
    fn inception_score_lies_in_its_range(raw in prop::collection::vec(0.0f64..1.0, 5 * 8), sharp in 0.5f64..30.0) {
        let mut probs = Vec::with_capacity(raw.len());
        for row in raw.chunks(5) {
            let w: Vec<f64> = row.iter().map(|v| (v * sharp).exp()).collect();
            let s: f64 = w.iter().sum();
            probs.extend(w.iter().map(|v| v / s));
        }
        let is = inception_score_analog(&probs, 5).unwrap();
        prop_assert!((1.0..=5.0).contains(&is), "{}", is);
    }
}
