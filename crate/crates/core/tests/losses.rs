use std::collections::BTreeMap;

use proptest::prelude::*;
use siammask_core::anchors::{cell_center, decode, encode, generate_anchors, AnchorConfig};
use siammask_core::geometry::{AxisBox, BinaryMask};
use siammask_core::losses::{
    attach_row_masks, box_loss, label_rows_2b, label_rows_3b, mask_loss, row_window_target, score_loss, sim_loss,
    MaskLossMode, RowLabels, POSITIVE_IOU,
};
use siammask_core::Tape;

fn single_row(y: f32, target: f32) -> RowLabels {
    let mut masks = BTreeMap::new();
    if y > 0.0 {
        masks.insert(0, vec![target]);
    }
    RowLabels {
        cells: 1,
        k: 1,
        y: vec![y],
        masks,
        mask_size: 1,
        box_targets: vec![None],
    }
}

#[test]
fn single_row_unit_mask_at_zero_logit_is_ln2() {
    for mode in [MaskLossMode::Strict, MaskLossMode::PerPositive] {
        for target in [1.0, -1.0] {
            let mut tape = Tape::<f64>::new();
            let logits = tape.constant(&[1, 1, 1], &[0.0]).unwrap();
            let l = mask_loss(&mut tape, logits, &single_row(1.0, target), mode).unwrap();
            assert!((tape.item(l) - std::f64::consts::LN_2).abs() < 1e-6, "{mode:?} {target}");
        }
    }
}

#[test]
fn all_negative_rows_give_exactly_zero_mask_loss() {
    let labels = label_rows_2b((8, 8), -1.0);
    assert_eq!(labels.num_positive_cells(), 0);
    let mut tape = Tape::<f64>::new();
    let vals: Vec<f32> = (0..4 * 289).map(|i| (i as f32 * 0.37).sin() * 5.0).collect();
    let logits = tape.constant(&[4, 17, 17], &vals).unwrap();
    for mode in [MaskLossMode::Strict, MaskLossMode::PerPositive] {
        let l = mask_loss(&mut tape, logits, &labels, mode).unwrap();
        assert_eq!(tape.item(l), 0.0);
    }
    let one = single_row(-1.0, 0.0);
    let logits = tape.constant(&[1, 1, 1], &[3.0]).unwrap();
    let l = mask_loss(&mut tape, logits, &one, MaskLossMode::Strict).unwrap();
    assert_eq!(tape.item(l), 0.0);
}

#[test]
fn mask_loss_ignores_negative_row_logits() {
    let mut labels = label_rows_2b((8, 8), 0.0);
    let patch = BinaryMask::from_fn(255, 255, |x, y| (100..160).contains(&x) && (90..170).contains(&y)).unwrap();
    attach_row_masks(&mut labels, &patch, 2);
    let base: Vec<f32> = (0..4 * 289).map(|i| (i as f32 * 0.11).cos()).collect();
    let mut moved = base.clone();
    for (i, v) in moved.iter_mut().enumerate() {
        if i % 289 != 8 * 17 + 8 {
            *v += 10.0;
        }
    }
    let eval = |vals: &[f32]| {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(&[4, 17, 17], vals).unwrap();
        let l = mask_loss(&mut tape, logits, &labels, MaskLossMode::Strict).unwrap();
        tape.item(l)
    };
    assert_eq!(eval(&base), eval(&moved));
}

#[test]
fn strict_mode_sums_over_positives_and_per_positive_averages() {
    let labels = {
        let mut l = label_rows_2b((8, 8), 1.0);
        let patch = BinaryMask::from_fn(255, 255, |x, _| x < 128).unwrap();
        attach_row_masks(&mut l, &patch, 3);
        l
    };
    let p = labels.num_positive_cells() as f64;
    assert_eq!(p, 5.0);
    let mut tape = Tape::<f64>::new();
    let logits = tape.constant(&[9, 17, 17], &vec![0.0; 9 * 289]).unwrap();
    let strict = mask_loss(&mut tape, logits, &labels, MaskLossMode::Strict).unwrap();
    let per = mask_loss(&mut tape, logits, &labels, MaskLossMode::PerPositive).unwrap();
    let ln2 = std::f64::consts::LN_2;
    assert!((tape.item(strict) - p * ln2).abs() < 1e-9);
    assert!((tape.item(per) - ln2).abs() < 1e-9);
}

fn brute_iou(a: &AxisBox, b: &AxisBox) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    inter / (a.area() + b.area() - inter)
}

#[test]
fn anchor_labels_match_brute_force_iou() {
    let anchors = generate_anchors(&AnchorConfig::default());
    let gts = [
        AxisBox::from_center(127.5, 127.5, 64.0, 64.0).unwrap(),
        AxisBox::from_center(100.0, 140.0, 30.0, 90.0).unwrap(),
        AxisBox::from_center(160.0, 110.0, 110.0, 40.0).unwrap(),
        AxisBox::from_center(127.5, 127.5, 5.0, 5.0).unwrap(),
    ];
    for gt in gts {
        let labels = label_rows_3b(&anchors, &gt).unwrap();
        assert_eq!(labels.y.len(), anchors.len());
        for (i, a) in anchors.anchors.iter().enumerate() {
            let positive = brute_iou(&a.to_box(), &gt) >= POSITIVE_IOU;
            assert_eq!(labels.y[i] > 0.0, positive, "anchor {i}");
            assert_eq!(labels.box_targets[i].is_some(), positive);
            if let Some(t) = labels.box_targets[i] {
                let back = decode(&t, a);
                assert!((back.x0 - gt.x0).abs() < 1e-9 && (back.y1 - gt.y1).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn centered_square_target_has_positive_anchor_at_center() {
    let anchors = generate_anchors(&AnchorConfig::default());
    let gt = AxisBox::from_center(cell_center(8), cell_center(8), 64.0, 64.0).unwrap();
    let labels = label_rows_3b(&anchors, &gt).unwrap();
    assert!(labels.positive_cells().contains(&(8 * 17 + 8)));
}

#[test]
fn two_branch_labels_are_a_disc() {
    let l = label_rows_2b((3, 12), 2.0);
    for n in 0..289 {
        let (i, j) = ((n / 17) as f64, (n % 17) as f64);
        let inside = ((i - 3.0).powi(2) + (j - 12.0).powi(2)).sqrt() <= 2.0;
        assert_eq!(l.y[n] > 0.0, inside);
    }
    assert_eq!(l.num_positive_cells(), 13);
}

#[test]
fn row_window_target_reads_the_cell_window() {
    let patch = BinaryMask::from_fn(255, 255, |x, y| x >= 64 && y < 64).unwrap();
    let t = row_window_target(&patch, 0, 127);
    for v in 0..127 {
        for u in 0..127 {
            let expect = u >= 64 && v < 64;
            assert_eq!(t[v * 127 + u] > 0.0, expect, "({u},{v})");
        }
    }
}

#[test]
fn score_and_sim_losses_at_zero_are_ln2() {
    let labels = label_rows_2b((8, 8), 2.0);
    let mut tape = Tape::<f64>::new();
    let s = tape.constant(&[1, 17, 17], &vec![0.0; 289]).unwrap();
    let l = sim_loss(&mut tape, s, &labels).unwrap();
    assert!((tape.item(l) - std::f64::consts::LN_2).abs() < 1e-9);

    let anchors = generate_anchors(&AnchorConfig::default());
    let gt = AxisBox::from_center(127.5, 127.5, 64.0, 64.0).unwrap();
    let labels = label_rows_3b(&anchors, &gt).unwrap();
    let s = tape.constant(&[10, 17, 17], &vec![0.0; 10 * 289]).unwrap();
    let l = score_loss(&mut tape, s, &labels).unwrap();
    assert!((tape.item(l) - std::f64::consts::LN_2).abs() < 1e-9);
}

#[test]
fn box_loss_vanishes_at_the_targets() {
    let anchors = generate_anchors(&AnchorConfig::default());
    let gt = AxisBox::from_center(120.0, 135.0, 50.0, 70.0).unwrap();
    let labels = label_rows_3b(&anchors, &gt).unwrap();
    let mut deltas = vec![0.0f32; 4 * anchors.len()];
    for (i, t) in labels.box_targets.iter().enumerate() {
        if let Some(t) = t {
            let (a, n) = (i / 289, i % 289);
            for c in 0..4 {
                deltas[(c * anchors.k + a) * 289 + n] = t[c] as f32;
            }
        }
    }
    let mut tape = Tape::<f64>::new();
    let d = tape.constant(&[4 * anchors.k, 17, 17], &deltas).unwrap();
    let l = box_loss(&mut tape, d, &labels).unwrap();
    assert!(tape.item(l).abs() < 1e-12);
}

proptest! {
    #[test]
    fn anchor_encoding_round_trips(cx in 20.0f64..230.0, cy in 20.0f64..230.0, w in 4.0f64..200.0, h in 4.0f64..200.0, a in 0usize..1445) {
        let anchors = generate_anchors(&AnchorConfig::default());
        let gt = AxisBox::from_center(cx, cy, w, h).unwrap();
        let back = decode(&encode(&gt, &anchors.anchors[a]), &anchors.anchors[a]);
        prop_assert!((back.x0 - gt.x0).abs() < 1e-9);
        prop_assert!((back.y0 - gt.y0).abs() < 1e-9);
        prop_assert!((back.x1 - gt.x1).abs() < 1e-9);
        prop_assert!((back.y1 - gt.y1).abs() < 1e-9);
    }

    #[test]
    fn mask_loss_is_nonnegative_and_bounded_by_logit_scale(vals in prop::collection::vec(-6.0f32..6.0, 4 * 289)) {
        let mut labels = label_rows_2b((8, 8), 2.0);
        let patch = BinaryMask::from_fn(255, 255, |x, y| (x + y) % 3 == 0).unwrap();
        attach_row_masks(&mut labels, &patch, 2);
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(&[4, 17, 17], &vals).unwrap();
        let l = mask_loss(&mut tape, logits, &labels, MaskLossMode::PerPositive).unwrap();
        let v = tape.item(l);
        prop_assert!(v >= 0.0);
        prop_assert!(v <= (1.0 + 6.0f64.exp()).ln() + 1e-9);
    }
}
