use bridgenet::metrics::{
    self, max_f, miou, ods_f, relative_gain, threshold_grid, AngleError, BoundaryCounts, Confusion, SquaredError,
};
use bridgenet::Rng;
use proptest::prelude::*;

const SIDE: usize = 8;

fn brute_miou(pred: &[i32], gt: &[i32], k: usize) -> f64 {
    let mut sum = 0.0;
    let mut present = 0;
    for c in 0..k as i32 {
        let in_gt = gt.iter().filter(|&&g| g == c).count();
        if in_gt == 0 {
            continue;
        }
        let inter = pred.iter().zip(gt).filter(|(&p, &g)| p == c && g == c).count();
        let union = pred.iter().zip(gt).filter(|(&p, &g)| p == c || g == c).count();
        sum += inter as f64 / union as f64;
        present += 1;
    }
    sum / present as f64
}

/// Direct threshold-by-threshold evaluation with explicit neighbourhood
/// scans, pooled over maps.
fn brute_f(probs: &[Vec<f32>], gt: &[Vec<bool>], r: isize) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for t in threshold_grid() {
        let (mut pred_hit, mut pred_n, mut gt_hit, mut gt_n) = (0u64, 0u64, 0u64, 0u64);
        for (p, g) in probs.iter().zip(gt) {
            let on = |y: isize, x: isize| p[(y * SIDE as isize + x) as usize] as f64 >= t;
            let edge = |y: isize, x: isize| g[(y * SIDE as isize + x) as usize];
            let near = |y: isize, x: isize, f: &dyn Fn(isize, isize) -> bool| {
                let mut any = false;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y + dy, x + dx);
                        if (0..SIDE as isize).contains(&yy) && (0..SIDE as isize).contains(&xx) && f(yy, xx) {
                            any = true;
                        }
                    }
                }
                any
            };
            for y in 0..SIDE as isize {
                for x in 0..SIDE as isize {
                    if on(y, x) {
                        pred_n += 1;
                        if near(y, x, &edge) {
                            pred_hit += 1;
                        }
                    }
                    if edge(y, x) {
                        gt_n += 1;
                        if near(y, x, &on) {
                            gt_hit += 1;
                        }
                    }
                }
            }
        }
        let f = if pred_n == 0 && gt_n == 0 {
            1.0
        } else {
            let prec = if pred_n == 0 { 0.0 } else { pred_hit as f64 / pred_n as f64 };
            let rec = if gt_n == 0 { 0.0 } else { gt_hit as f64 / gt_n as f64 };
            if prec + rec == 0.0 {
                0.0
            } else {
                2.0 * prec * rec / (prec + rec)
            }
        };
        best = best.max(f);
    }
    best
}

/// Probabilities snapped to a coarse grid so many pixels tie exactly on
/// threshold boundaries.
fn random_probs(rng: &mut Rng) -> Vec<f32> {
    (0..SIDE * SIDE)
        .map(|_| match rng.below(3) {
            0 => rng.below(101) as f32 / 100.0,
            1 => rng.unit() as f32,
            _ => 0.0,
        })
        .collect()
}

fn random_edges(rng: &mut Rng) -> Vec<bool> {
    let density = rng.unit() * 0.5;
    (0..SIDE * SIDE).map(|_| rng.unit() < density).collect()
}

#[test]
fn miou_matches_brute_force_on_200_grids() {
    let mut rng = Rng::new(7);
    for case in 0..200 {
        let k = 2 + case % 4;
        let gt: Vec<i32> = (0..SIDE * SIDE).map(|_| rng.below(k) as i32).collect();
        let pred: Vec<i32> = gt
            .iter()
            .map(|&g| if rng.unit() < 0.6 { g } else { rng.below(k) as i32 })
            .collect();
        assert_eq!(miou(&pred, &gt, k, None).unwrap(), brute_miou(&pred, &gt, k), "case {case}");
    }
}

#[test]
fn max_f_matches_brute_force_on_200_grids() {
    let mut rng = Rng::new(8);
    for case in 0..200 {
        let probs = random_probs(&mut rng);
        let gt = random_edges(&mut rng);
        assert_eq!(max_f(&[&probs], &[&gt]).unwrap(), brute_f(&[probs], &[gt], 0), "case {case}");
    }
}

#[test]
fn ods_f_matches_brute_force_on_200_grids() {
    let mut rng = Rng::new(9);
    for case in 0..200 {
        let n_maps = 1 + case % 3;
        let probs: Vec<Vec<f32>> = (0..n_maps).map(|_| random_probs(&mut rng)).collect();
        let gt: Vec<Vec<bool>> = (0..n_maps).map(|_| random_edges(&mut rng)).collect();
        let p: Vec<&[f32]> = probs.iter().map(|v| v.as_slice()).collect();
        let g: Vec<&[bool]> = gt.iter().map(|v| v.as_slice()).collect();
        assert_eq!(ods_f(&p, &g, SIDE, SIDE, 1).unwrap(), brute_f(&probs, &gt, 1), "case {case}");
    }
}

#[test]
fn shifted_edges_within_tolerance_match() {
    // vertical gt edge at column 3, prediction at column 4: every pixel is
    // matched within radius 1
    let gt: Vec<bool> = (0..64).map(|i| i % 8 == 3).collect();
    let probs: Vec<f32> = (0..64).map(|i| if i % 8 == 4 { 0.8 } else { 0.0 }).collect();
    assert_eq!(ods_f(&[&probs], &[&gt], 8, 8, 1).unwrap(), 1.0);
    // diagonal edge shifted right: the pixel pushed off the image is missing
    // from the prediction, yet its ground-truth pixel still has a predicted
    // neighbour
    let gt: Vec<bool> = (0..64).map(|i| i % 8 == i / 8).collect();
    let probs: Vec<f32> = (0..64).map(|i| if i / 8 < 7 && i % 8 == i / 8 + 1 { 1.0 } else { 0.0 }).collect();
    assert_eq!(ods_f(&[&probs], &[&gt], 8, 8, 1).unwrap(), 1.0);
    assert_eq!(ods_f(&[&probs], &[&gt], 8, 8, 0).unwrap(), 0.0);
    // a two-pixel shift is outside the tolerance
    let far: Vec<f32> = (0..64).map(|i| if i % 8 == 5 { 1.0 } else { 0.0 }).collect();
    let col: Vec<bool> = (0..64).map(|i| i % 8 == 3).collect();
    assert_eq!(ods_f(&[&far], &[&col], 8, 8, 1).unwrap(), 0.0);
}

#[test]
fn boundary_counts_merge_like_a_single_pass() {
    let mut rng = Rng::new(10);
    let maps: Vec<(Vec<f32>, Vec<bool>)> = (0..6).map(|_| (random_probs(&mut rng), random_edges(&mut rng))).collect();
    let valid = vec![true; SIDE * SIDE];
    let mut whole = BoundaryCounts::new(1);
    let mut left = BoundaryCounts::new(1);
    let mut right = BoundaryCounts::new(1);
    for (i, (p, g)) in maps.iter().enumerate() {
        whole.add(p, g, &valid, SIDE, SIDE).unwrap();
        let part = if i < 2 { &mut left } else { &mut right };
        part.add(p, g, &valid, SIDE, SIDE).unwrap();
    }
    left.merge(&right).unwrap();
    assert_eq!(left, whole);
    assert!(left.merge(&BoundaryCounts::new(0)).is_err());
}

#[test]
fn error_accumulators_merge_exactly() {
    let pred = [1.0f32, 2.0, 4.0, -1.0];
    let gt = [0.0f32, 2.5, 4.0, 1.0];
    let mask = [true, true, false, true];
    let mut a = SquaredError::default();
    a.add(&pred[..2], &gt[..2], &mask[..2]).unwrap();
    let mut b = SquaredError::default();
    b.add(&pred[2..], &gt[2..], &mask[2..]).unwrap();
    a.merge(&b);
    assert_eq!(a.rmse().unwrap(), metrics::rmse(&pred, &gt, &mask).unwrap());
    assert!((a.rmse().unwrap() - ((1.0 + 0.25 + 4.0) / 3.0f64).sqrt()).abs() < 1e-12);

    let mut e = AngleError::default();
    e.add(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0], &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0], &[true, true]).unwrap();
    assert!((e.mean().unwrap() - 45.0).abs() < 1e-9);
    assert!((e.rmse().unwrap() - (90.0f64 * 90.0 / 2.0).sqrt()).abs() < 1e-9);
}

#[test]
fn rmse_and_angle_analytic_cases() {
    let mut rng = Rng::new(11);
    for _ in 0..20 {
        let c = rng.uniform(-2.0, 2.0) as f32;
        let gt: Vec<f32> = (0..50).map(|_| rng.uniform(0.0, 5.0) as f32).collect();
        let pred: Vec<f32> = gt.iter().map(|v| v + c).collect();
        let expect: f64 = {
            let s: f64 = pred.iter().zip(&gt).map(|(p, g)| (*p as f64 - *g as f64).powi(2)).sum();
            (s / 50.0).sqrt()
        };
        let v = metrics::rmse(&pred, &gt, &[true; 50]).unwrap();
        assert!((v - expect).abs() < 1e-12);
        assert!((v - c.abs() as f64).abs() < 1e-5);
    }
    // rotation by a known angle in the xz-plane
    for deg in [0.0f64, 10.0, 37.5, 90.0, 135.0, 180.0] {
        let a = deg.to_radians();
        let gt = [1.0f32, 0.0, 0.0];
        let pred = [a.cos() as f32, 0.0, a.sin() as f32];
        let v = metrics::mean_angle_error(&pred, &gt, &[true]).unwrap();
        assert!((v - deg).abs() < 1e-4, "{deg}: {v}");
    }
}

#[test]
fn confusion_rejects_out_of_range_labels() {
    let mut c = Confusion::new(2).unwrap();
    assert!(c.add(&[2], &[0], None).is_err());
    assert!(c.add(&[0], &[-1], None).is_err());
    assert!(c.add(&[0], &[-1], Some(-1)).is_ok());
}

/// Strictly increasing map of [0, 1] that keeps every value inside its
/// threshold cell, so the set of pixels passing each threshold is unchanged.
fn within_cell(p: f32, gamma: f64) -> f32 {
    let v = p as f64;
    if v >= 1.0 {
        return p;
    }
    let cell = (v * 100.0).floor();
    let lo = cell / 100.0;
    let mut frac = ((v - lo) * 100.0).clamp(0.0, 1.0);
    frac = frac.powf(gamma);
    let out = (lo + frac / 100.0) as f32;
    // stay strictly below the next threshold after rounding to f32
    if out as f64 >= (cell + 1.0) / 100.0 {
        p
    } else {
        out
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn f_measures_invariant_under_rank_preserving_perturbation(seed in 0u64..10_000, gamma in 0.3f64..3.0) {
        let mut rng = Rng::new(seed);
        let probs: Vec<f32> = (0..SIDE * SIDE).map(|_| rng.unit() as f32).collect();
        let gt = random_edges(&mut rng);
        let moved: Vec<f32> = probs.iter().map(|&p| within_cell(p, gamma)).collect();
        for (a, b) in probs.iter().zip(&moved) {
            for (c, d) in probs.iter().zip(&moved) {
                prop_assert!(a.partial_cmp(c) == b.partial_cmp(d) || a == b || c == d);
            }
        }
        prop_assert_eq!(max_f(&[&probs], &[&gt]).unwrap(), max_f(&[&moved], &[&gt]).unwrap());
        prop_assert_eq!(
            ods_f(&[&probs], &[&gt], SIDE, SIDE, 1).unwrap(),
            ods_f(&[&moved], &[&gt], SIDE, SIDE, 1).unwrap()
        );
    }

    #[test]
    fn relative_gain_sign_convention(base in 0.1f64..10.0, delta in 0.001f64..1.0) {
        prop_assert!(relative_gain(base + delta, base, false).unwrap() > 0.0);
        prop_assert!(relative_gain(base - delta, base, true).unwrap() > 0.0);
        prop_assert!(relative_gain(base - delta, base, false).unwrap() < 0.0);
        prop_assert!(relative_gain(base + delta, base, true).unwrap() < 0.0);
    }

    #[test]
    fn tolerance_never_lowers_recall_or_precision(seed in 0u64..10_000) {
        let mut rng = Rng::new(seed);
        let probs = random_probs(&mut rng);
        let gt = random_edges(&mut rng);
        let valid = vec![true; SIDE * SIDE];
        let mut tight = BoundaryCounts::new(0);
        tight.add(&probs, &gt, &valid, SIDE, SIDE).unwrap();
        let mut loose = BoundaryCounts::new(1);
        loose.add(&probs, &gt, &valid, SIDE, SIDE).unwrap();
        for t in 0..metrics::NUM_THRESHOLDS {
            prop_assert!(loose.pred_hit[t] >= tight.pred_hit[t]);
            prop_assert!(loose.gt_hit[t] >= tight.gt_hit[t]);
            prop_assert_eq!(loose.pred_total[t], tight.pred_total[t]);
        }
    }
}
