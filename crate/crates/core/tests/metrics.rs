mod common;

use common::{brute_auc, brute_boundary, brute_boundary_f, brute_box_iou, brute_jaccard, random_mask, rng};
use rand::Rng;
use unitrack::engine::metrics::{boundary, boundary_f, boundary_radius, eval_vot};
use unitrack::engine::eval_vos;
use unitrack::geometry::{iou, BBox, LabelMap};
use unitrack::Error;

fn random_labels(rng: &mut impl Rng, objects: u8) -> LabelMap {
    let data = (0..64).map(|_| if rng.random_bool(0.4) { rng.random_range(1..=objects) } else { 0 }).collect();
    LabelMap::new(8, 8, objects as usize, data).unwrap()
}

fn random_box(rng: &mut impl Rng) -> BBox {
    let (x, y) = (rng.random_range(0..6) as f64, rng.random_range(0..6) as f64);
    BBox::new(x, y, x + rng.random_range(1..=8 - x as usize) as f64, y + rng.random_range(1..=8 - y as usize) as f64)
}

#[test]
fn boundary_matches_brute_force_on_8x8() {
    let mut rng = rng(1);
    for _ in 0..500 {
        let density = rng.random_range(0.1..0.9);
        let m = random_mask(&mut rng, 8, 8, density);
        let b = boundary(&m);
        let mut got = Vec::new();
        for r in 0..8 {
            for c in 0..8 {
                if b.get(r, c) {
                    got.push((r as i64, c as i64));
                }
            }
        }
        assert_eq!(got, brute_boundary(&m));
    }
}

#[test]
fn boundary_f_matches_brute_force_on_8x8() {
    let mut rng = rng(2);
    assert_eq!(boundary_radius(8, 8), 1);
    for _ in 0..500 {
        let (da, db) = (rng.random_range(0.0..0.8), rng.random_range(0.0..0.8));
        let a = random_mask(&mut rng, 8, 8, da);
        let b = random_mask(&mut rng, 8, 8, db);
        assert_eq!(boundary_f(&a, &b), brute_boundary_f(&a, &b));
    }
}

#[test]
fn boundary_f_uses_a_wider_radius_on_large_images() {
    // 200x200: diagonal 282.8, radius ceil(2.26) = 3.
    assert_eq!(boundary_radius(200, 200), 3);
    let mut rng = rng(3);
    for _ in 0..3 {
        let a = random_mask(&mut rng, 200, 200, 0.7);
        let b = random_mask(&mut rng, 200, 200, 0.7);
        assert_eq!(boundary_f(&a, &b), brute_boundary_f(&a, &b));
    }
}

#[test]
fn eval_vos_matches_brute_force_on_8x8() {
    let mut rng = rng(4);
    for _ in 0..50 {
        let frames = rng.random_range(1..5);
        let objects = rng.random_range(1..4u8);
        let pred: Vec<LabelMap> = (0..frames).map(|_| random_labels(&mut rng, objects)).collect();
        let gt: Vec<LabelMap> = (0..frames).map(|_| random_labels(&mut rng, objects)).collect();
        let (mut j, mut f, mut n) = (0.0, 0.0, 0.0);
        for (p, g) in pred.iter().zip(&gt) {
            for o in 1..=objects as usize {
                j += brute_jaccard(&p.object_mask(o), &g.object_mask(o));
                f += brute_boundary_f(&p.object_mask(o), &g.object_mask(o));
                n += 1.0;
            }
        }
        let s = eval_vos(&pred, &gt, objects as usize).unwrap();
        assert_eq!(s.j, j / n);
        assert_eq!(s.f, f / n);
        assert_eq!(s.g, (j / n + f / n) / 2.0);
    }
}

#[test]
fn eval_vos_scores_identical_maps_as_perfect() {
    let mut rng = rng(5);
    let maps: Vec<LabelMap> = (0..3).map(|_| random_labels(&mut rng, 3)).collect();
    let s = eval_vos(&maps, &maps, 3).unwrap();
    assert_eq!((s.j, s.f, s.g), (1.0, 1.0, 1.0));
}

#[test]
fn box_iou_matches_brute_force() {
    let mut rng = rng(6);
    for _ in 0..1000 {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        assert!((iou(&a, &b) - brute_box_iou(&a, &b)).abs() < 1e-12);
    }
}

#[test]
fn eval_vot_auc_matches_threshold_enumeration() {
    let mut rng = rng(7);
    for _ in 0..200 {
        let frames = rng.random_range(1..10);
        let gt: Vec<Option<BBox>> = (0..frames).map(|_| Some(random_box(&mut rng))).collect();
        let pred: Vec<Option<BBox>> =
            (0..frames).map(|_| if rng.random_bool(0.8) { Some(random_box(&mut rng)) } else { None }).collect();
        let ious: Vec<f64> =
            pred.iter().zip(&gt).map(|(p, g)| p.map_or(0.0, |p| iou(&p, g.as_ref().unwrap()))).collect();
        let s = eval_vot(&pred, &gt).unwrap();
        assert_eq!(s.auc, brute_auc(&ious));
        assert_eq!(s.frames, frames);
    }
}

#[test]
fn eval_vot_hand_values() {
    let g = BBox::new(0.0, 0.0, 4.0, 4.0);
    // IoU 1, IoU 0.5, lost: success fractions are 2/3 up to t = 0.5 and 1/3 above.
    let pred = vec![Some(g), Some(BBox::new(0.0, 0.0, 4.0, 2.0)), None];
    let gt = vec![Some(g); 3];
    let s = eval_vot(&pred, &gt).unwrap();
    let expected = (26.0 * 2.0 / 3.0 + 25.0 / 3.0) / 51.0;
    assert!((s.auc - expected).abs() < 1e-12);
    // Centre errors 0, 1, infinite.
    assert!((s.precision - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn eval_vot_zero_iou_never_counts_as_success() {
    let g = BBox::new(0.0, 0.0, 2.0, 2.0);
    let s = eval_vot(&[Some(BBox::new(10.0, 10.0, 12.0, 12.0))], &[Some(g)]).unwrap();
    assert_eq!(s.auc, 0.0);
}

#[test]
fn eval_vot_skips_absent_ground_truth() {
    let g = BBox::new(0.0, 0.0, 2.0, 2.0);
    let s = eval_vot(&[Some(g), Some(g)], &[Some(g), None]).unwrap();
    assert_eq!(s.frames, 1);
    assert_eq!(s.auc, 1.0);
}

#[test]
fn length_mismatch_is_an_error() {
    let g = BBox::new(0.0, 0.0, 2.0, 2.0);
    assert!(matches!(eval_vot(&[Some(g)], &[]), Err(Error::LengthMismatch(1, 0))));
    let m = LabelMap::zeros(8, 8, 1);
    assert!(matches!(eval_vos(&[m.clone()], &[m.clone(), m], 1), Err(Error::LengthMismatch(1, 2))));
}

#[test]
fn eval_vos_rejects_mismatched_sizes() {
    let a = LabelMap::zeros(8, 8, 1);
    let b = LabelMap::zeros(8, 9, 1);
    assert!(eval_vos(&[a], &[b], 1).is_err());
}
