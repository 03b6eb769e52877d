mod common;

use common::oracle;
use mois_core::evaluation::{
    connected_components, dsc, fill_holes, lesion_f1, lesionwise_dsc, remove_small_components, select_largest, Connectivity,
    EvalError,
};
use mois_core::volume::{Extents, Mask, Spacing};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CONNS: [Connectivity; 5] = [
    Connectivity::C4,
    Connectivity::C8,
    Connectivity::C6,
    Connectivity::C18,
    Connectivity::C26,
];

fn boxes(e: Extents, list: &[([usize; 3], [usize; 3])]) -> Mask {
    Mask::from_fn(e, |x, y, z| {
        list.iter()
            .any(|(lo, hi)| (lo[0]..hi[0]).contains(&x) && (lo[1]..hi[1]).contains(&y) && (lo[2]..hi[2]).contains(&z))
    })
}

#[test]
fn dsc_hand_cases() {
    let e = Extents::new(4, 4, 1);
    let a = boxes(e, &[([0, 0, 0], [2, 2, 1])]);
    let b = boxes(e, &[([1, 0, 0], [3, 2, 1])]);
    assert_eq!(dsc(&a, &b).unwrap(), 0.5);
    assert_eq!(dsc(&Mask::empty(e), &Mask::empty(e)).unwrap(), 1.0);
    assert_eq!(dsc(&a, &Mask::empty(e)).unwrap(), 0.0);
    assert!(matches!(dsc(&a, &Mask::empty(Extents::new(4, 4, 2))), Err(EvalError::ExtentMismatch)));
}

#[test]
fn lesion_matching_hand_case() {
    let e = Extents::new(12, 12, 1);
    // gt lesions: one hit well, one hit at IoU 1/16, one missed
    let gt = boxes(e, &[([0, 0, 0], [3, 3, 1]), ([5, 0, 0], [9, 4, 1]), ([0, 8, 0], [2, 10, 1])]);
    let pred = boxes(e, &[([0, 0, 0], [3, 2, 1]), ([5, 0, 0], [6, 1, 1]), ([10, 10, 0], [12, 12, 1])]);
    let m = lesion_f1(&pred, &gt, 0.1, Connectivity::C8).unwrap();
    assert_eq!((m.tp, m.fp, m.fn_), (1, 2, 2));
    assert_eq!(m.f1, 2.0 / 6.0);
    assert_eq!(lesionwise_dsc(&m), Some(2.0 * 6.0 / 15.0));
    let loose = lesion_f1(&pred, &gt, 0.0625, Connectivity::C8).unwrap();
    assert_eq!((loose.tp, loose.fp, loose.fn_), (2, 1, 1));
    let none = lesion_f1(&Mask::empty(e), &gt, 0.1, Connectivity::C8).unwrap();
    assert_eq!((none.f1, lesionwise_dsc(&none)), (0.0, None));
}

#[test]
fn metrics_agree_with_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..60 {
        let e = Extents::new(rng.random_range(1..=16), rng.random_range(1..=16), rng.random_range(1..=8));
        let gt = oracle::random_mask(e, &mut rng);
        let pred = oracle::random_mask(e, &mut rng);
        let conn = CONNS[rng.random_range(0..CONNS.len())];
        let thr = rng.random_range(0.05..0.6);
        assert!((dsc(&pred, &gt).unwrap() - oracle::dsc(&pred, &gt)).abs() <= 1e-12);
        let m = lesion_f1(&pred, &gt, thr, conn).unwrap();
        let r = oracle::lesion_metrics(&pred, &gt, thr, conn);
        assert_eq!((m.tp, m.fp, m.fn_), (r.tp, r.fp, r.fn_));
        assert!((m.f1 - r.f1).abs() <= 1e-12);
        match (lesionwise_dsc(&m), r.lesionwise) {
            (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-12),
            (a, b) => assert_eq!(a, b),
        }
    }
}

#[test]
fn components_agree_with_flood_fill() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..150 {
        let e = Extents::new(rng.random_range(1..=7), rng.random_range(1..=7), rng.random_range(1..=7));
        let density = rng.random_range(0.1..0.7);
        let m = Mask::from_fn(e, |_, _, _| rng.random_bool(density));
        for conn in CONNS {
            assert_eq!(connected_components(&m, conn).data, oracle::flood_labels(&m, conn), "{conn:?}");
        }
    }
}

#[test]
fn diagonal_neighbours_depend_on_connectivity() {
    let e = Extents::new(2, 2, 2);
    let m = Mask::from_fn(e, |x, y, z| x == y && y == z);
    let counts: Vec<u32> = CONNS.iter().map(|&c| connected_components(&m, c).count).collect();
    assert_eq!(counts, vec![2, 2, 2, 2, 1]);
    let plane = Mask::from_fn(e, |x, y, z| x == y && z == 0);
    let counts: Vec<u32> = CONNS.iter().map(|&c| connected_components(&plane, c).count).collect();
    assert_eq!(counts, vec![2, 1, 2, 1, 1]);
}

#[test]
fn small_component_removal_uses_physical_volume() {
    let e = Extents::new(10, 10, 3);
    let m = boxes(e, &[([0, 0, 0], [2, 2, 1]), ([5, 5, 0], [8, 8, 3])]);
    let spacing = Spacing([1.0, 1.0, 2.0]);
    let out = remove_small_components(&m, 8.5, spacing, Connectivity::C26);
    assert_eq!(out.count(), 27, "4 voxels of 2 mm³ fall under 8.5 mm³");
    assert_eq!(remove_small_components(&m, 8.0, spacing, Connectivity::C26), m, "threshold is exclusive");
}

#[test]
fn largest_components_are_selected_in_size_order() {
    let e = Extents::new(10, 10, 1);
    let m = boxes(e, &[([0, 0, 0], [1, 1, 1]), ([3, 0, 0], [6, 3, 1]), ([0, 5, 0], [2, 7, 1])]);
    let labels = connected_components(&m, Connectivity::C8);
    let sizes = labels.sizes();
    let chosen = select_largest(&labels, 2);
    assert_eq!(chosen.iter().map(|&l| sizes[l as usize]).collect::<Vec<_>>(), vec![9, 4]);
}

#[test]
fn hole_filling_is_per_slice() {
    let e = Extents::new(5, 5, 2);
    let ring = Mask::from_fn(e, |x, y, z| z == 0 && (1..4).contains(&x) && (1..4).contains(&y) && (x, y) != (2, 2));
    let filled = fill_holes(&ring);
    assert!(filled.get(2, 2, 0));
    assert_eq!(filled.count(), 9);
    let open = Mask::from_fn(e, |x, y, _| x == 0 || y == 0);
    assert_eq!(fill_holes(&open), open);
}
