//! Dense-prediction metrics, relative gains and their mergeable accumulators.
//!
//! Every accumulator is a monoid: shard the samples any way, [`merge`] the
//! partial states and the final value is identical to a single pass.
//!
//! [`merge`]: Confusion::merge

mod boundary;
pub mod reference;
mod report;

pub use boundary::{max_f, ods_f, threshold_grid, BoundaryCounts, NUM_THRESHOLDS};
pub use report::{MetricsReport, TaskResult};

use crate::error::{Error, Result};

/// Global confusion matrix over `k` classes; rows are ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    k: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("class count must be positive"));
        }
        Ok(Confusion {
            k,
            counts: vec![0; k * k],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    /// Adds one map. Pixels whose ground truth equals `ignore` are skipped;
    /// labels outside `0..k` are an error.
    pub fn add(&mut self, pred: &[i32], gt: &[i32], ignore: Option<i32>) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("miou", &[pred.len()], &[gt.len()]));
        }
        let k = self.k as i32;
        for (&p, &t) in pred.iter().zip(gt) {
            if Some(t) == ignore {
                continue;
            }
            if !(0..k).contains(&p) || !(0..k).contains(&t) {
                return Err(Error::Invalid(format!("label out of range 0..{k}: pred {p}, gt {t}")));
            }
            self.counts[t as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) -> Result<()> {
        if other.k != self.k {
            return Err(Error::shape("confusion merge", &[self.k], &[other.k]));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Mean IoU over the classes that occur in the ground truth.
    pub fn miou(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(Error::EmptyEvaluation("no labelled pixels"));
        }
        let mut sum = 0.0;
        let mut present = 0usize;
        for c in 0..self.k {
            let gt_c: u64 = (0..self.k).map(|p| self.count(c, p)).sum();
            if gt_c == 0 {
                continue;
            }
            let pred_c: u64 = (0..self.k).map(|t| self.count(t, c)).sum();
            let inter = self.count(c, c);
            sum += inter as f64 / (gt_c + pred_c - inter) as f64;
            present += 1;
        }
        Ok(sum / present as f64)
    }
}

pub fn miou(pred: &[i32], gt: &[i32], num_classes: usize, ignore: Option<i32>) -> Result<f64> {
    let mut c = Confusion::new(num_classes)?;
    c.add(pred, gt, ignore)?;
    c.miou()
}

/// Running sum of squared errors.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SquaredError {
    pub sum_sq: f64,
    pub count: u64,
}

impl SquaredError {
    pub fn add(&mut self, pred: &[f32], gt: &[f32], mask: &[bool]) -> Result<()> {
        if pred.len() != gt.len() || pred.len() != mask.len() {
            return Err(Error::shape("rmse", &[pred.len(), mask.len()], &[gt.len()]));
        }
        for ((&p, &t), &m) in pred.iter().zip(gt).zip(mask) {
            if m {
                let d = p as f64 - t as f64;
                self.sum_sq += d * d;
                self.count += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &SquaredError) {
        self.sum_sq += other.sum_sq;
        self.count += other.count;
    }

    pub fn rmse(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::EmptyEvaluation("empty mask"));
        }
        Ok((self.sum_sq / self.count as f64).sqrt())
    }
}

pub fn rmse(pred: &[f32], gt: &[f32], mask: &[bool]) -> Result<f64> {
    let mut e = SquaredError::default();
    e.add(pred, gt, mask)?;
    e.rmse()
}

/// Per-pixel angle errors between normal fields, in degrees.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AngleError {
    pub sum: f64,
    pub sum_sq: f64,
    pub count: u64,
}

impl AngleError {
    /// `pred` and `gt` are `3×N` channel-major. Predictions are normalized
    /// here; a zero prediction counts as 90°.
    pub fn add(&mut self, pred: &[f32], gt: &[f32], mask: &[bool]) -> Result<()> {
        let n = mask.len();
        if pred.len() != 3 * n || gt.len() != 3 * n {
            return Err(Error::shape("mean_angle_error", &[pred.len(), gt.len()], &[3 * n]));
        }
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let p = [pred[i] as f64, pred[n + i] as f64, pred[2 * n + i] as f64];
            let t = [gt[i] as f64, gt[n + i] as f64, gt[2 * n + i] as f64];
            let np = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nt = t.iter().map(|v| v * v).sum::<f64>().sqrt();
            let angle = if np == 0.0 || nt == 0.0 {
                90.0
            } else {
                let cos = p.iter().zip(&t).map(|(a, b)| a * b).sum::<f64>() / (np * nt);
                cos.clamp(-1.0, 1.0).acos().to_degrees()
            };
            self.sum += angle;
            self.sum_sq += angle * angle;
            self.count += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &AngleError) {
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
        self.count += other.count;
    }

    pub fn mean(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::EmptyEvaluation("empty mask"));
        }
        Ok(self.sum / self.count as f64)
    }

    /// Root mean square of the per-pixel angles.
    pub fn rmse(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::EmptyEvaluation("empty mask"));
        }
        Ok((self.sum_sq / self.count as f64).sqrt())
    }
}

pub fn mean_angle_error(pred: &[f32], gt: &[f32], mask: &[bool]) -> Result<f64> {
    let mut e = AngleError::default();
    e.add(pred, gt, mask)?;
    e.mean()
}

/// Relative gain in percent; positive means better than the reference
/// whichever direction the metric runs.
pub fn relative_gain(m_mtl: f64, m_stl: f64, lower_is_better: bool) -> Result<f64> {
    if m_stl == 0.0 {
        return Err(Error::Invalid("relative gain against a zero reference".into()));
    }
    let sign = if lower_is_better { -1.0 } else { 1.0 };
    Ok(sign * (m_mtl - m_stl) / m_stl * 100.0)
}

/// Mean of the per-task gains.
pub fn delta_mtl(gains: &[f64]) -> Result<f64> {
    if gains.is_empty() {
        return Err(Error::Invalid("multi-task gain of an empty task list".into()));
    }
    Ok(gains.iter().sum::<f64>() / gains.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn miou_examples() {
        assert_eq!(miou(&[0, 1, 1, 0], &[0, 1, 1, 0], 2, None).unwrap(), 1.0);
        let v = miou(&[0, 0, 1, 1], &[0, 1, 1, 1], 2, None).unwrap();
        assert!((v - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!(matches!(
            miou(&[0, 1], &[255, 255], 2, Some(255)),
            Err(Error::EmptyEvaluation(_))
        ));
        assert!(Confusion::new(0).is_err());
    }

    #[test]
    fn miou_skips_classes_absent_from_ground_truth() {
        // class 2 never occurs in gt; the false positive still hurts class 0
        let v = miou(&[0, 2, 1, 1], &[0, 0, 1, 1], 3, None).unwrap();
        assert!((v - (0.5 + 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn confusion_merge_equals_single_pass() {
        let (p, t) = ([0, 1, 2, 2, 1, 0], [0, 2, 2, 1, 1, 0]);
        let mut a = Confusion::new(3).unwrap();
        a.add(&p[..3], &t[..3], None).unwrap();
        let mut b = Confusion::new(3).unwrap();
        b.add(&p[3..], &t[3..], None).unwrap();
        a.merge(&b).unwrap();
        let mut whole = Confusion::new(3).unwrap();
        whole.add(&p, &t, None).unwrap();
        assert_eq!(a, whole);
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0], &[true, true]).unwrap(), 0.0);
        assert!((rmse(&[1.0, 3.0], &[2.0, 1.0], &[true, true]).unwrap() - 2.5f64.sqrt()).abs() < 1e-12);
        let gt = [0.25f32, -1.5, 3.0];
        let pred: Vec<f32> = gt.iter().map(|v| v + 0.5).collect();
        assert!((rmse(&pred, &gt, &[true; 3]).unwrap() - 0.5).abs() < 1e-6);
        assert!(rmse(&[1.0], &[2.0], &[false]).is_err());
    }

    #[test]
    fn angle_examples() {
        let x = [1.0f32, 0.0, 0.0];
        let y = [0.0f32, 1.0, 0.0];
        assert_eq!(mean_angle_error(&x, &x, &[true]).unwrap(), 0.0);
        assert!((mean_angle_error(&x, &y, &[true]).unwrap() - 90.0).abs() < 1e-6);
        let s = std::f32::consts::FRAC_1_SQRT_2;
        assert!((mean_angle_error(&x, &[s, s, 0.0], &[true]).unwrap() - 45.0).abs() < 1e-5);
        assert!((mean_angle_error(&[0.0; 3], &x, &[true]).unwrap() - 90.0).abs() < 1e-12);
        // unnormalized predictions are rescaled first
        assert!(mean_angle_error(&[5.0, 0.0, 0.0], &x, &[true]).unwrap().abs() < 1e-6);
        assert!(mean_angle_error(&x, &x, &[false]).is_err());
    }

    #[test]
    fn relative_gain_examples() {
        assert!((relative_gain(52.73, 50.95, false).unwrap() - 3.49).abs() < 0.01);
        assert!((relative_gain(0.5247, 0.5698, true).unwrap() - 7.92).abs() < 0.01);
        assert_eq!(relative_gain(3.0, 3.0, true).unwrap(), 0.0);
        assert!(relative_gain(1.0, 0.0, false).is_err());
    }

    #[test]
    fn improvement_is_positive_in_both_directions() {
        assert!(relative_gain(0.6, 0.5, false).unwrap() > 0.0);
        assert!(relative_gain(0.4, 0.5, true).unwrap() > 0.0);
        assert!(relative_gain(0.4, 0.5, false).unwrap() < 0.0);
        assert!(relative_gain(0.6, 0.5, true).unwrap() < 0.0);
    }

    #[test]
    fn delta_mtl_examples() {
        assert!((delta_mtl(&[3.49, 7.92]).unwrap() - 5.705).abs() < 1e-12);
        assert!(delta_mtl(&[]).is_err());
    }
}
