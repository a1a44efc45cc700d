//! Depth accuracy metrics and thresholded occlusion-boundary metrics.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub rmse: f64,
    pub rmse_log: f64,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObMetrics {
    pub recall: f64,
    pub precision: f64,
    pub fscore: f64,
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Evaluation window for depth: ground truth must lie in
/// `(min_depth, max_depth)`; predictions are clamped to `[min_depth, max_depth]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthRange {
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for DepthRange {
    fn default() -> Self {
        Self {
            min_depth: 1e-3,
            max_depth: 10.0,
        }
    }
}

pub fn depth_metrics(
    pred: ArrayView2<f64>,
    gt: ArrayView2<f64>,
    valid: ArrayView2<u8>,
    range: DepthRange,
) -> Result<DepthMetrics> {
    if pred.dim() != gt.dim() || pred.dim() != valid.dim() {
        return Err(shape_err!(
            "depth metrics: pred {:?}, gt {:?}, valid {:?}",
            pred.dim(),
            gt.dim(),
            valid.dim()
        ));
    }
    if !(range.max_depth > 0.0 && range.min_depth >= 0.0 && range.min_depth < range.max_depth) {
        return Err(config_err!("invalid depth range {range:?}"));
    }
    let (mut sq, mut sq_log, mut abs_rel, mut sq_rel, mut log10) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut deltas = [0usize; 3];
    let mut n = 0usize;
    Zip::from(&pred).and(&gt).and(&valid).for_each(|&p, &g, &v| {
        if v == 0 || !(g > range.min_depth && g < range.max_depth) {
            return;
        }
        let p = p.clamp(range.min_depth, range.max_depth);
        n += 1;
        let diff = p - g;
        sq += diff * diff;
        let dl = p.ln() - g.ln();
        sq_log += dl * dl;
        abs_rel += diff.abs() / g;
        sq_rel += diff * diff / g;
        log10 += (p.log10() - g.log10()).abs();
        let ratio = (p / g).max(g / p);
        for (k, count) in deltas.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *count += 1;
            }
        }
    });
    if n == 0 {
        return Err(Error::Undefined("no pixel inside the depth evaluation range".into()));
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        rmse: (sq / nf).sqrt(),
        rmse_log: (sq_log / nf).sqrt(),
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        log10: log10 / nf,
        delta1: deltas[0] as f64 / nf,
        delta2: deltas[1] as f64 / nf,
        delta3: deltas[2] as f64 / nf,
    })
}

/// Chebyshev dilation of a binary map by `radius` (separable max filter).
fn dilate(mask: &Array2<u8>, radius: usize) -> Array2<u8> {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dim();
    let mut rows = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let lo = c.saturating_sub(radius);
            let hi = (c + radius).min(w - 1);
            rows[[r, c]] = (lo..=hi).map(|k| mask[[r, k]]).max().unwrap_or(0);
        }
    }
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        let lo = r.saturating_sub(radius);
        let hi = (r + radius).min(h - 1);
        for c in 0..w {
            out[[r, c]] = (lo..=hi).map(|k| rows[[k, c]]).max().unwrap_or(0);
        }
    }
    out
}

/// Binarizes `prob > threshold` and scores it against `gt`.
///
/// A predicted positive is a true positive when a ground-truth positive lies
/// within Chebyshev distance `tolerance`; a ground-truth positive is missed
/// when no predicted positive lies within that distance. Empty denominators
/// count as perfect (recall 0/0 = 1, precision 0/0 = 1), so an empty
/// prediction on an empty ground truth scores F = 1.
pub fn ob_metrics(prob: ArrayView2<f64>, gt: ArrayView2<u8>, threshold: f64, tolerance: usize) -> Result<ObMetrics> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(config_err!("boundary threshold {threshold} outside [0, 1]"));
    }
    if prob.dim() != gt.dim() {
        return Err(shape_err!("boundary metrics: prob {:?} vs gt {:?}", prob.dim(), gt.dim()));
    }
    let pred = prob.mapv(|p| (p > threshold) as u8);
    let gt = gt.mapv(|g| (g != 0) as u8);
    let gt_near = dilate(&gt, tolerance);
    let pred_near = dilate(&pred, tolerance);
    let (mut tp, mut fp, mut fn_, mut gt_hit) = (0, 0, 0, 0);
    Zip::from(&pred)
        .and(&gt)
        .and(&gt_near)
        .and(&pred_near)
        .for_each(|&p, &g, &gn, &pn| {
            if p == 1 {
                if gn == 1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
            if g == 1 {
                if pn == 1 {
                    gt_hit += 1;
                } else {
                    fn_ += 1;
                }
            }
        });
    let recall = if gt_hit + fn_ == 0 { 1.0 } else { gt_hit as f64 / (gt_hit + fn_) as f64 };
    let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let fscore = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(ObMetrics {
        recall,
        precision,
        fscore,
        threshold,
        tp,
        fp,
        fn_,
    })
}

/// Mean over images; every field is averaged.
pub fn mean_depth_metrics(items: &[DepthMetrics]) -> Option<DepthMetrics> {
    if items.is_empty() {
        return None;
    }
    let n = items.len() as f64;
    let avg = |f: fn(&DepthMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
    Some(DepthMetrics {
        rmse: avg(|m| m.rmse),
        rmse_log: avg(|m| m.rmse_log),
        abs_rel: avg(|m| m.abs_rel),
        sq_rel: avg(|m| m.sq_rel),
        log10: avg(|m| m.log10),
        delta1: avg(|m| m.delta1),
        delta2: avg(|m| m.delta2),
        delta3: avg(|m| m.delta3),
    })
}

/// Mean of the per-image rates; counts are summed.
pub fn mean_ob_metrics(items: &[ObMetrics]) -> Option<ObMetrics> {
    let first = items.first()?;
    let n = items.len() as f64;
    Some(ObMetrics {
        recall: items.iter().map(|m| m.recall).sum::<f64>() / n,
        precision: items.iter().map(|m| m.precision).sum::<f64>() / n,
        fscore: items.iter().map(|m| m.fscore).sum::<f64>() / n,
        threshold: first.threshold,
        tp: items.iter().map(|m| m.tp).sum(),
        fp: items.iter().map(|m| m.fp).sum(),
        fn_: items.iter().map(|m| m.fn_).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn two_pixel_depth_example() {
        let pred = array![[1.0, 2.0]];
        let gt = array![[1.0, 4.0]];
        let m = depth_metrics(pred.view(), gt.view(), array![[1u8, 1]].view(), DepthRange::default()).unwrap();
        assert!((m.rmse - 2f64.sqrt()).abs() < 1e-12);
        assert!((m.abs_rel - 0.25).abs() < 1e-12);
        assert_eq!(m.delta1, 0.5);
    }

    #[test]
    fn identity_and_uniform_scale() {
        let gt = array![[1.0, 2.5], [3.0, 7.0]];
        let ones = Array2::ones((2, 2));
        let m = depth_metrics(gt.view(), gt.view(), ones.view(), DepthRange::default()).unwrap();
        assert_eq!((m.rmse, m.rmse_log, m.abs_rel, m.sq_rel, m.log10), (0.0, 0.0, 0.0, 0.0, 0.0));
        assert_eq!((m.delta1, m.delta2, m.delta3), (1.0, 1.0, 1.0));
        let scaled = gt.mapv(|g| 1.2 * g);
        let m = depth_metrics(scaled.view(), gt.view(), ones.view(), DepthRange::default()).unwrap();
        assert_eq!(m.delta1, 1.0);
        assert!((m.abs_rel - 0.2).abs() < 1e-12);
    }

    #[test]
    fn empty_effective_mask_is_undefined() {
        let gt = array![[20.0, 30.0]];
        let r = depth_metrics(gt.view(), gt.view(), array![[1u8, 1]].view(), DepthRange::default());
        assert!(matches!(r, Err(Error::Undefined(_))));
    }

    #[test]
    fn two_by_two_boundary_example() {
        let prob = array![[0.8, 0.1], [0.9, 0.6]];
        let gt = array![[1u8, 0], [1, 1]];
        let m = ob_metrics(prob.view(), gt.view(), 0.7, 0).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (2, 0, 1));
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.precision, 1.0);
        assert!((m.fscore - 0.8).abs() < 1e-12);
    }

    #[test]
    fn boundary_degenerate_cases() {
        let gt = array![[1u8, 0], [0, 1]];
        let exact = gt.mapv(|g| g as f64);
        let m = ob_metrics(exact.view(), gt.view(), 0.99, 0).unwrap();
        assert_eq!((m.recall, m.precision, m.fscore), (1.0, 1.0, 1.0));
        let zero = Array2::zeros((2, 2));
        let m = ob_metrics(zero.view(), gt.view(), 0.7, 0).unwrap();
        assert_eq!((m.recall, m.fscore), (0.0, 0.0));
        let none = Array2::zeros((2, 2));
        let m = ob_metrics(zero.view(), none.view(), 0.7, 0).unwrap();
        assert_eq!((m.recall, m.precision, m.fscore), (1.0, 1.0, 1.0));
        assert!(matches!(ob_metrics(zero.view(), gt.view(), 1.5, 0), Err(Error::Config(_))));
    }

    #[test]
    fn tolerance_accepts_near_misses() {
        let gt = array![[0u8, 1, 0, 0]];
        let prob = array![[0.0, 0.0, 0.9, 0.0]];
        let exact = ob_metrics(prob.view(), gt.view(), 0.7, 0).unwrap();
        assert_eq!((exact.tp, exact.fp, exact.fn_), (0, 1, 1));
        let loose = ob_metrics(prob.view(), gt.view(), 0.7, 1).unwrap();
        assert_eq!((loose.tp, loose.fp, loose.fn_), (1, 0, 0));
    }
}
