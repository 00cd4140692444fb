//! Threshold-swept F-measures for probability maps.
//!
//! A pixel is predicted positive at threshold `t` when `p >= t`. The grid is
//! `k/100` for `k = 1..=100` plus one threshold above 1 that predicts nothing,
//! so an empty prediction is always among the candidates and an all-zero map
//! predicts nothing at any threshold.
//!
//! With tolerance radius `r`, a predicted pixel is a hit when some ground
//! truth pixel lies within Chebyshev distance `r`, and a ground-truth pixel is
//! recovered when some predicted pixel does. With `r = 0` this is plain
//! pixelwise precision and recall.

use crate::error::{Error, Result};

pub const NUM_THRESHOLDS: usize = 101;

pub fn threshold_grid() -> [f64; NUM_THRESHOLDS] {
    let mut t = [0.0; NUM_THRESHOLDS];
    for (k, v) in t.iter_mut().enumerate().take(100) {
        *v = (k + 1) as f64 / 100.0;
    }
    t[100] = f64::INFINITY;
    t
}

/// Number of grid thresholds `t` with `p >= t`.
fn passed(p: f64, grid: &[f64; NUM_THRESHOLDS]) -> usize {
    if !(p >= grid[0]) {
        return 0;
    }
    let mut k = ((p * 100.0).floor() as usize).clamp(1, 100);
    while k > 1 && p < grid[k - 1] {
        k -= 1;
    }
    while k < 100 && p >= grid[k] {
        k += 1;
    }
    k
}

/// Dataset-level counts at every threshold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoundaryCounts {
    pub radius: usize,
    /// Predicted pixels near some ground-truth pixel.
    pub pred_hit: Vec<u64>,
    pub pred_total: Vec<u64>,
    /// Ground-truth pixels near some predicted pixel.
    pub gt_hit: Vec<u64>,
    pub gt_total: u64,
}

impl BoundaryCounts {
    pub fn new(radius: usize) -> Self {
        BoundaryCounts {
            radius,
            pred_hit: vec![0; NUM_THRESHOLDS],
            pred_total: vec![0; NUM_THRESHOLDS],
            gt_hit: vec![0; NUM_THRESHOLDS],
            gt_total: 0,
        }
    }

    /// Adds one `h×w` map; `valid` masks out pixels on both sides.
    pub fn add(&mut self, probs: &[f32], gt: &[bool], valid: &[bool], h: usize, w: usize) -> Result<()> {
        let n = h * w;
        if probs.len() != n || gt.len() != n || valid.len() != n {
            return Err(Error::shape("boundary f-measure", &[probs.len(), gt.len(), valid.len()], &[n]));
        }
        let grid = threshold_grid();
        let r = self.radius;
        let window = |y: usize, x: usize| {
            let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
            (y0..=y1).flat_map(move |yy| (x0..=x1).map(move |xx| yy * w + xx))
        };
        let mut pred_hist = [0u64; NUM_THRESHOLDS + 1];
        let mut hit_hist = [0u64; NUM_THRESHOLDS + 1];
        let mut gt_hist = [0u64; NUM_THRESHOLDS + 1];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if !valid[i] {
                    continue;
                }
                let k = passed(probs[i] as f64, &grid);
                pred_hist[k] += 1;
                if window(y, x).any(|j| valid[j] && gt[j]) {
                    hit_hist[k] += 1;
                }
                if gt[i] {
                    self.gt_total += 1;
                    let best = window(y, x)
                        .filter(|&j| valid[j])
                        .map(|j| passed(probs[j] as f64, &grid))
                        .max()
                        .unwrap_or(0);
                    gt_hist[best] += 1;
                }
            }
        }
        // a pixel that passes k thresholds counts at thresholds 0..k
        let (mut cp, mut ch, mut cg) = (0u64, 0u64, 0u64);
        for t in (0..NUM_THRESHOLDS).rev() {
            cp += pred_hist[t + 1];
            ch += hit_hist[t + 1];
            cg += gt_hist[t + 1];
            self.pred_total[t] += cp;
            self.pred_hit[t] += ch;
            self.gt_hit[t] += cg;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &BoundaryCounts) -> Result<()> {
        if other.radius != self.radius {
            return Err(Error::Invalid("merging boundary counts with different radii".into()));
        }
        for t in 0..NUM_THRESHOLDS {
            self.pred_hit[t] += other.pred_hit[t];
            self.pred_total[t] += other.pred_total[t];
            self.gt_hit[t] += other.gt_hit[t];
        }
        self.gt_total += other.gt_total;
        Ok(())
    }

    /// F at threshold index `t`. No predictions and no ground truth scores
    /// 1; otherwise an empty side has precision or recall 0.
    pub fn f_at(&self, t: usize) -> f64 {
        if self.pred_total[t] == 0 && self.gt_total == 0 {
            return 1.0;
        }
        let p = ratio(self.pred_hit[t], self.pred_total[t]);
        let r = ratio(self.gt_hit[t], self.gt_total);
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    /// Best F over the grid and the threshold attaining it (first on ties).
    pub fn best(&self) -> (f64, f64) {
        let grid = threshold_grid();
        let mut best = (f64::NEG_INFINITY, 0.0);
        for (t, &th) in grid.iter().enumerate() {
            let f = self.f_at(t);
            if f > best.0 {
                best = (f, th);
            }
        }
        best
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Maximum pixelwise F over the threshold grid, counts pooled over maps.
pub fn max_f(probs: &[&[f32]], gt: &[&[bool]]) -> Result<f64> {
    pooled(0, probs, gt, None)
}

/// Best dataset-level boundary F with Chebyshev tolerance `radius`. Maps
/// are `h×w`.
pub fn ods_f(probs: &[&[f32]], gt: &[&[bool]], h: usize, w: usize, radius: usize) -> Result<f64> {
    pooled(radius, probs, gt, Some((h, w)))
}

fn pooled(radius: usize, probs: &[&[f32]], gt: &[&[bool]], hw: Option<(usize, usize)>) -> Result<f64> {
    if probs.len() != gt.len() {
        return Err(Error::shape("f-measure map count", &[probs.len()], &[gt.len()]));
    }
    let mut acc = BoundaryCounts::new(radius);
    for (p, g) in probs.iter().zip(gt) {
        let (h, w) = hw.unwrap_or((1, p.len()));
        acc.add(p, g, &vec![true; p.len()], h, w)?;
    }
    Ok(acc.best().0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_counts_are_exact() {
        let grid = threshold_grid();
        assert_eq!(passed(0.0, &grid), 0);
        assert_eq!(passed(0.009, &grid), 0);
        assert_eq!(passed(-0.5, &grid), 0);
        assert_eq!(passed(1.0, &grid), 100);
        assert_eq!(passed(7.5, &grid), 100);
        assert_eq!(passed(0.07, &grid), 7);
        for k in 1..=100 {
            let t = k as f64 / 100.0;
            assert_eq!(passed(t, &grid), k, "at {t}");
            assert_eq!(passed(t - 1e-12, &grid), k - 1, "below {t}");
        }
    }

    #[test]
    fn max_f_examples() {
        let probs = [1.0f32, 0.0, 1.0];
        let gt = [true, false, true];
        assert_eq!(max_f(&[&probs], &[&gt]).unwrap(), 1.0);
        let v = max_f(&[&[0.9, 0.2]], &[&[false, true]]).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(max_f(&[&[0.0, 0.0]], &[&[false, false]]).unwrap(), 1.0);
    }

    #[test]
    fn ods_examples() {
        let (h, w) = (6, 6);
        let mut gt = vec![false; h * w];
        for y in 0..h {
            gt[y * w + 2] = true;
        }
        let probs: Vec<f32> = gt.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        assert_eq!(ods_f(&[&probs], &[&gt], h, w, 0).unwrap(), 1.0);
        // one column to the right: every pixel within tolerance 1
        let shifted: Vec<f32> = (0..h * w).map(|i| if i % w == 3 { 1.0 } else { 0.0 }).collect();
        assert_eq!(ods_f(&[&shifted], &[&gt], h, w, 1).unwrap(), 1.0);
        assert_eq!(ods_f(&[&shifted], &[&gt], h, w, 0).unwrap(), 0.0);
        assert_eq!(ods_f(&[&vec![0.0; h * w]], &[&gt], h, w, 1).unwrap(), 0.0);
    }

    #[test]
    fn masked_pixels_are_ignored() {
        let mut acc = BoundaryCounts::new(1);
        acc.add(&[1.0, 1.0], &[true, false], &[true, false], 1, 2).unwrap();
        assert_eq!(acc.best().0, 1.0);
    }
}
