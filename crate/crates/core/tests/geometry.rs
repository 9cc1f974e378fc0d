use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use siammask_core::geometry::{
    convex_hull, mask_iou, mbr_box, min_max_box, opt_box, opt_objective, polygon_area, rotated_iou, AxisBox,
    BinaryMask, BoxStrategy, RotatedBox,
};

fn random_convex_blob(rng: &mut ChaCha8Rng, side: usize) -> BinaryMask {
    loop {
        let (cx, cy) = (rng.gen_range(20.0..side as f64 - 20.0), rng.gen_range(20.0..side as f64 - 20.0));
        let pts: Vec<(f64, f64)> = (0..rng.gen_range(3..9))
            .map(|_| (cx + rng.gen_range(-18.0..18.0), cy + rng.gen_range(-18.0..18.0)))
            .collect();
        let hull = convex_hull(&pts);
        if hull.len() < 3 {
            continue;
        }
        let m = BinaryMask::from_fn(side, side, |x, y| {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            (0..hull.len()).all(|i| {
                let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
                (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0) >= 0.0
            })
        })
        .unwrap();
        if m.count() >= 3 {
            return m;
        }
    }
}

/// Smallest padded bounding-rectangle area over `steps` orientations in `[0, pi)`.
fn sweep_area(mask: &BinaryMask, steps: usize) -> f64 {
    let pts: Vec<(f64, f64)> = mask.set_pixels().map(|(x, y)| (x as f64 + 0.5, y as f64 + 0.5)).collect();
    (0..steps)
        .map(|i| {
            let t = PI * i as f64 / steps as f64;
            let (c, s) = (t.cos(), t.sin());
            let (mut u0, mut u1, mut v0, mut v1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
            for &(x, y) in &pts {
                let (u, v) = (x * c + y * s, -x * s + y * c);
                u0 = u0.min(u);
                u1 = u1.max(u);
                v0 = v0.min(v);
                v1 = v1.max(v);
            }
            (u1 - u0 + 1.0) * (v1 - v0 + 1.0)
        })
        .fold(f64::MAX, f64::min)
}

fn raster_iou(a: &RotatedBox, b: &RotatedBox, lo: f64, hi: f64, n: usize) -> f64 {
    let step = (hi - lo) / n as f64;
    let (mut inter, mut union) = (0usize, 0usize);
    for j in 0..n {
        for i in 0..n {
            let (x, y) = (lo + (i as f64 + 0.5) * step, lo + (j as f64 + 0.5) * step);
            let (ia, ib) = (a.contains(x, y), b.contains(x, y));
            inter += usize::from(ia && ib);
            union += usize::from(ia || ib);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn random_rotated(rng: &mut ChaCha8Rng) -> RotatedBox {
    RotatedBox::new(
        rng.gen_range(20.0..44.0),
        rng.gen_range(20.0..44.0),
        rng.gen_range(2.0..30.0),
        rng.gen_range(2.0..30.0),
        rng.gen_range(-PI..PI),
    )
    .unwrap()
}

#[test]
fn mbr_matches_angle_sweep_oracle_on_convex_blobs() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for _ in 0..40 {
        let m = random_convex_blob(&mut rng, 96);
        let mbr = mbr_box(&m).unwrap().area();
        let oracle = sweep_area(&m, 3600);
        assert!((mbr - oracle).abs() <= 0.005 * oracle, "mbr {mbr} oracle {oracle}");
    }
}

#[test]
fn rotated_iou_matches_rasterization_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..40 {
        let (a, b) = (random_rotated(&mut rng), random_rotated(&mut rng));
        let exact = rotated_iou(&a, &b);
        let raster = raster_iou(&a, &b, 0.0, 64.0, 512);
        assert!((exact - raster).abs() < 0.01, "{exact} vs {raster} for {a:?} {b:?}");
    }
}

#[test]
fn rotated_iou_of_disjoint_contained_and_identical_boxes() {
    let a = RotatedBox::new(10.0, 10.0, 4.0, 4.0, 0.3).unwrap();
    let far = RotatedBox::new(50.0, 10.0, 4.0, 4.0, 0.3).unwrap();
    let inner = RotatedBox::new(10.0, 10.0, 2.0, 2.0, 0.3).unwrap();
    assert_eq!(rotated_iou(&a, &far), 0.0);
    assert!((rotated_iou(&a, &a) - 1.0).abs() < 1e-12);
    assert!((rotated_iou(&a, &inner) - 0.25).abs() < 1e-12);
}

#[test]
fn axis_aligned_rectangle_mask_gives_identical_boxes() {
    let m = BinaryMask::from_fn(40, 40, |x, y| (5..25).contains(&x) && (10..18).contains(&y)).unwrap();
    let mm = min_max_box(&m).unwrap();
    assert_eq!(mm, AxisBox::new(5.0, 10.0, 25.0, 18.0).unwrap());
    let mbr = mbr_box(&m).unwrap();
    assert!((mbr.area() - mm.area()).abs() < 1e-9);
    assert!((rotated_iou(&mbr, &mm.to_rotated()) - 1.0).abs() < 1e-9);
}

#[test]
fn mbr_of_rotated_rectangle_recovers_the_angle() {
    let r = RotatedBox::new(64.0, 64.0, 60.0, 20.0, 0.5).unwrap();
    let m = r.rasterize(128, 128).unwrap();
    let mbr = mbr_box(&m).unwrap();
    assert!(rotated_iou(&mbr, &r) > 0.9);
    assert!(mbr.area() < 0.8 * min_max_box(&m).unwrap().area());
}

#[test]
fn opt_box_is_at_least_as_fit_as_mbr() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..10 {
        let m = random_convex_blob(&mut rng, 64);
        let opt = opt_box(&m).unwrap();
        let mbr = mbr_box(&m).unwrap();
        assert!(opt_objective(&m, &opt) >= opt_objective(&m, &mbr) - 1e-12);
    }
}

#[test]
fn strategies_parse_and_print() {
    for s in [BoxStrategy::MinMax, BoxStrategy::Mbr, BoxStrategy::Opt] {
        assert_eq!(s.as_str().parse::<BoxStrategy>().unwrap(), s);
    }
    assert!("square".parse::<BoxStrategy>().is_err());
}

#[test]
fn empty_masks_are_rejected() {
    let m = BinaryMask::new(8, 8).unwrap();
    assert!(min_max_box(&m).is_err());
    assert!(mbr_box(&m).is_err());
}

#[test]
fn largest_component_keeps_the_biggest_blob() {
    let m = BinaryMask::from_fn(30, 30, |x, y| {
        (2..12).contains(&x) && (2..12).contains(&y) || (20..23).contains(&x) && (20..23).contains(&y)
    })
    .unwrap();
    let c = m.largest_component();
    assert_eq!(c.count(), 100);
    assert!(c.get(5, 5) && !c.get(21, 21));
}

#[test]
fn largest_component_joins_diagonal_neighbours_and_breaks_ties_by_scan_order() {
    let diag = BinaryMask::from_fn(5, 5, |x, y| x == y).unwrap();
    assert_eq!(diag.largest_component(), diag);
    let two = BinaryMask::from_fn(9, 3, |x, y| y == 1 && (x == 1 || x == 2 || x == 6 || x == 7)).unwrap();
    let c = two.largest_component();
    assert!(c.get(1, 1) && !c.get(6, 1));
    assert!(BinaryMask::new(4, 4).unwrap().largest_component().is_empty());
}

fn mask_strategy() -> impl Strategy<Value = BinaryMask> {
    (4usize..24, 4usize..24)
        .prop_flat_map(|(w, h)| (Just(w), Just(h), prop::collection::vec(any::<bool>(), w * h)))
        .prop_filter_map("nonempty", |(w, h, bits)| {
            let m = BinaryMask::from_bits(w, h, bits).unwrap();
            (!m.is_empty()).then_some(m)
        })
}

fn rotated_strategy() -> impl Strategy<Value = RotatedBox> {
    (0.0f64..50.0, 0.0f64..50.0, 0.5f64..30.0, 0.5f64..30.0, -PI..PI)
        .prop_map(|(cx, cy, w, h, a)| RotatedBox::new(cx, cy, w, h, a).unwrap())
}

proptest! {
    #[test]
    fn mbr_area_never_exceeds_min_max(m in mask_strategy()) {
        let mbr = mbr_box(&m).unwrap();
        let mm = min_max_box(&m).unwrap();
        prop_assert!(mbr.area() <= mm.area() + 1e-9);
    }

    #[test]
    fn mbr_covers_every_set_pixel_center(m in mask_strategy()) {
        let mbr = mbr_box(&m).unwrap();
        let grown = RotatedBox::new(mbr.cx, mbr.cy, mbr.w + 1e-6, mbr.h + 1e-6, mbr.angle).unwrap();
        for (x, y) in m.set_pixels() {
            prop_assert!(grown.contains(x as f64 + 0.5, y as f64 + 0.5));
        }
    }

    #[test]
    fn rotated_iou_is_symmetric_and_bounded(a in rotated_strategy(), b in rotated_strategy()) {
        let ab = rotated_iou(&a, &b);
        let ba = rotated_iou(&b, &a);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!((rotated_iou(&a, &a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn corners_round_trip_and_area_matches_polygon(a in rotated_strategy()) {
        let back = RotatedBox::from_corners(&a.corners()).unwrap();
        prop_assert!(rotated_iou(&a, &back) > 1.0 - 1e-9);
        prop_assert!((polygon_area(&a.corners()).abs() - a.area()).abs() < 1e-9 * a.area().max(1.0));
    }

    #[test]
    fn mask_iou_is_symmetric_and_one_on_itself(a in mask_strategy()) {
        prop_assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        let flipped = BinaryMask::from_fn(a.width(), a.height(), |x, y| a.get(a.width() - 1 - x, y)).unwrap();
        prop_assert_eq!(mask_iou(&a, &flipped).unwrap(), mask_iou(&flipped, &a).unwrap());
    }

    #[test]
    fn largest_component_is_a_subset(m in mask_strategy()) {
        let c = m.largest_component();
        prop_assert!(c.count() >= 1);
        for (x, y) in c.set_pixels() {
            prop_assert!(m.get(x, y));
        }
    }
}
