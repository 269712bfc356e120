use heisenbridge::distance::{distance_sq, sr_distance_sq_with, DistanceConvention, DistanceQuery};
use heisenbridge::group::{group_mul, GroupPoint};
use proptest::prelude::*;

const ALPHA: f64 = 0.25;

fn point() -> impl Strategy<Value = GroupPoint> {
    (-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0).prop_map(|(x, y, z)| GroupPoint::new(x, y, z))
}

fn d(p: GroupPoint, q: GroupPoint) -> f64 {
    distance_sq(p, q, ALPHA).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn left_invariant(q0 in point(), q1 in point(), q2 in point()) {
        let a = distance_sq(group_mul(q0, q1, ALPHA), group_mul(q0, q2, ALPHA), ALPHA);
        let b = distance_sq(q1, q2, ALPHA);
        prop_assert!((a - b).abs() <= 1e-10 * b.max(1e-12), "{} vs {}", a, b);
    }

    #[test]
    fn symmetric(q1 in point(), q2 in point()) {
        let a = distance_sq(q1, q2, ALPHA);
        let b = distance_sq(q2, q1, ALPHA);
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn triangle_inequality(p in point(), q in point(), r in point()) {
        prop_assert!(d(p, r) <= d(p, q) + d(q, r) + 1e-8);
    }

    #[test]
    fn dominates_planar_distance(p in point(), q in point()) {
        let e2 = (p.x - q.x).powi(2) + (p.y - q.y).powi(2);
        prop_assert!(distance_sq(p, q, ALPHA) >= e2 * (1.0 - 1e-12));
    }

    #[test]
    fn conventions_agree_without_vertical_offset(x in -3.0f64..3.0, y in -3.0f64..3.0) {
        let q = DistanceQuery { q1: GroupPoint::default(), q2: GroupPoint::new(x, y, 0.0), alpha: ALPHA };
        let k = sr_distance_sq_with(&q, DistanceConvention::Kernel);
        let p = sr_distance_sq_with(&q, DistanceConvention::Printed);
        prop_assert!((k - p).abs() <= 1e-12 * k.max(1.0));
    }
}

#[test]
fn vertical_conventions_differ_by_the_expected_factor() {
    // π|z|/α against 2απ|z|
    let q = DistanceQuery { q1: GroupPoint::default(), q2: GroupPoint::new(0.0, 0.0, 1.3), alpha: ALPHA };
    let k = sr_distance_sq_with(&q, DistanceConvention::Kernel);
    let p = sr_distance_sq_with(&q, DistanceConvention::Printed);
    assert!((k - std::f64::consts::PI * 1.3 / ALPHA).abs() < 1e-9 * k);
    assert!((k / p - 1.0 / (2.0 * ALPHA * ALPHA)).abs() < 1e-9 * k / p);
}
