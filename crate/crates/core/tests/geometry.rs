mod common;

use std::time::Instant;

use proptest::prelude::*;
use unitrack::geometry::{box_from_pinpoints, extract_pinpoints, giou, iou, mask_to_box, rasterize_boxes, BBox, BinaryMask};

fn mask_from_bits(bits: u32, side: usize) -> BinaryMask {
    let data = (0..side * side).map(|i| bits >> i & 1 == 1).collect();
    BinaryMask::new(side, side, data).unwrap()
}

fn recovers_box(m: &BinaryMask) -> bool {
    let p = extract_pinpoints(m).unwrap();
    Some(box_from_pinpoints(&p).unwrap()) == mask_to_box(m)
}

#[test]
fn pinpoints_recover_every_4x4_box() {
    let start = Instant::now();
    for bits in 1u32..1 << 16 {
        assert!(recovers_box(&mask_from_bits(bits, 4)), "mask bits {bits:#06x}");
    }
    let mut rng = common::rng(7);
    for i in 0..1000 {
        let density = [0.02, 0.2, 0.5, 0.9][i % 4];
        let mut m = common::random_mask(&mut rng, 32, 32, density);
        if m.is_empty() {
            m.set(i % 32, (i * 7) % 32, true);
        }
        assert!(recovers_box(&m));
    }
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn every_pinpoint_lies_on_its_side() {
    let mut rng = common::rng(11);
    for _ in 0..200 {
        let m = common::random_mask(&mut rng, 12, 9, 0.15);
        let Some(b) = mask_to_box(&m) else { continue };
        let p = extract_pinpoints(&m).unwrap();
        assert!(p.top.iter().all(|&(r, c)| r as f64 == b.y1 && m.get(r, c)));
        assert!(p.bottom.iter().all(|&(r, c)| r as f64 == b.y2 && m.get(r, c)));
        assert!(p.left.iter().all(|&(r, c)| c as f64 == b.x1 && m.get(r, c)));
        assert!(p.right.iter().all(|&(r, c)| c as f64 == b.x2 && m.get(r, c)));
    }
}

#[test]
fn rasterized_boxes_reproduce_their_tight_boxes() {
    let boxes = [Some(BBox::new(2.0, 3.0, 10.0, 7.0)), None, Some(BBox::new(12.0, 0.0, 15.0, 15.0))];
    let labels = rasterize_boxes(&boxes, 16, 16);
    assert_eq!(labels.boxes(), boxes.to_vec());
}

proptest! {
    #[test]
    fn iou_and_giou_are_symmetric_and_bounded(
        a in (0.0..50.0f64, 0.0..50.0f64, 0.5..30.0f64, 0.5..30.0f64),
        b in (0.0..50.0f64, 0.0..50.0f64, 0.5..30.0f64, 0.5..30.0f64),
    ) {
        let a = BBox::from_xywh(a.0, a.1, a.2, a.3);
        let b = BBox::from_xywh(b.0, b.1, b.2, b.3);
        prop_assert!((iou(&a, &b) - iou(&b, &a)).abs() < 1e-12);
        prop_assert!((iou(&a, &b) - common::brute_box_iou(&a, &b)).abs() < 1e-12);
        let g = giou(&a, &b);
        prop_assert!((-1.0..=1.0).contains(&g));
        prop_assert!(g <= iou(&a, &b) + 1e-12);
        prop_assert!((giou(&a, &a) - 1.0).abs() < 1e-12);
    }
}
