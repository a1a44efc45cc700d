//! Slow, dependency-free reference implementations used to cross-check the
//! tensor code: central finite differences, pixel-loop metrics, direct
//! convolution and loss formulas on plain `f64` slices.
//!
//! Nothing here calls into the modules it checks. Images are row-major
//! slices with explicit `(h, w)` sizes.

use crate::error::{Error, Result};

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Oracle(format!("step h must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Oracle(format!("non-finite function value around coordinate {i}")));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// `max_i |a_i - b_i| / max(max_i |b_i|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let scale = b.iter().fold(floor, |m, v| m.max(v.abs()));
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale
}

/// SILog on one flat batch: `alpha * sqrt(mean d^2 - lambda (mean d)^2)`.
pub fn silog_reference(pred: &[f64], gt: &[f64], valid: &[f64], lambda: f64, alpha: f64) -> f64 {
    let mut n = 0.0;
    let mut s = 0.0;
    let mut s2 = 0.0;
    for i in 0..pred.len() {
        if valid[i] == 1.0 {
            let d = pred[i].ln() - gt[i].ln();
            n += 1.0;
            s += d;
            s2 += d * d;
        }
    }
    let v = s2 / n - lambda * (s / n) * (s / n);
    if v <= 0.0 {
        0.0
    } else {
        alpha * v.sqrt()
    }
}

/// Class-balanced cross-entropy of one image of logits.
pub fn cce_reference(logit: &[f64], gt: &[f64], eps: f64) -> f64 {
    let n = logit.len() as f64;
    let pos: f64 = gt.iter().sum();
    let beta = (n - pos) / n;
    let mut acc = 0.0;
    for i in 0..logit.len() {
        let p = (1.0 / (1.0 + (-logit[i]).exp())).clamp(eps, 1.0 - eps);
        if gt[i] == 1.0 {
            acc += beta * p.ln();
        } else {
            acc += (1.0 - beta) * (1.0 - p).ln();
        }
    }
    -acc / n
}

/// Cross-boundary contrast map with clamped (replicate) neighbor indices.
pub fn diff_map_reference(d: &[f64], h: usize, w: usize, n: usize) -> Vec<f64> {
    let at = |r: isize, c: isize| {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        d[r * w + c]
    };
    let n = n as isize;
    let mut out = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            out[r as usize * w + c as usize] =
                (at(r - n, c) - at(r + n, c)).abs() + (at(r, c - n) - at(r, c + n)).abs();
        }
    }
    out
}

/// Contrast loss of one image; `hinge` clamps each term at zero.
pub fn obdcl_reference(d: &[f64], b: &[f64], h: usize, w: usize, n: usize, margin: f64, hinge: bool) -> f64 {
    let delta = diff_map_reference(d, h, w, n);
    let count: f64 = b.iter().sum();
    if count == 0.0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..h * w {
        if b[i] == 1.0 {
            let t = margin - delta[i];
            acc += if hinge { t.max(0.0) } else { t };
        }
    }
    acc / count
}

/// Depth metrics by explicit pixel loop, in the order
/// `[rmse, rmse_log, abs_rel, sq_rel, log10, delta1, delta2, delta3]`.
pub fn brute_depth_metrics(pred: &[f64], gt: &[f64], valid: &[u8], min_depth: f64, max_depth: f64) -> Option<[f64; 8]> {
    let mut sums = [0.0f64; 8];
    let mut n = 0.0;
    for i in 0..pred.len() {
        if valid[i] != 1 || gt[i] <= min_depth || gt[i] >= max_depth {
            continue;
        }
        let p = if pred[i] < min_depth {
            min_depth
        } else if pred[i] > max_depth {
            max_depth
        } else {
            pred[i]
        };
        let g = gt[i];
        n += 1.0;
        sums[0] += (p - g).powi(2);
        sums[1] += (p.ln() - g.ln()).powi(2);
        sums[2] += (p - g).abs() / g;
        sums[3] += (p - g).powi(2) / g;
        sums[4] += (p.log10() - g.log10()).abs();
        let ratio = if p / g > g / p { p / g } else { g / p };
        sums[5] += (ratio < 1.25) as u8 as f64;
        sums[6] += (ratio < 1.25 * 1.25) as u8 as f64;
        sums[7] += (ratio < 1.25 * 1.25 * 1.25) as u8 as f64;
    }
    if n == 0.0 {
        return None;
    }
    let mut out = sums.map(|s| s / n);
    out[0] = out[0].sqrt();
    out[1] = out[1].sqrt();
    Some(out)
}

/// Boundary counts and rates by exhaustive neighborhood search:
/// `(tp, fp, fn, recall, precision, fscore)`. Recall and precision with an
/// empty denominator are 1.
pub fn brute_ob_metrics(
    prob: &[f64],
    gt: &[u8],
    h: usize,
    w: usize,
    threshold: f64,
    t: usize,
) -> (usize, usize, usize, f64, f64, f64) {
    let pred: Vec<bool> = prob.iter().map(|&p| p > threshold).collect();
    let truth: Vec<bool> = gt.iter().map(|&g| g != 0).collect();
    let any_within = |map: &[bool], r: usize, c: usize| -> bool {
        for rr in 0..h {
            for cc in 0..w {
                if map[rr * w + cc] && r.abs_diff(rr) <= t && c.abs_diff(cc) <= t {
                    return true;
                }
            }
        }
        false
    };
    let (mut tp, mut fp, mut fn_, mut hit) = (0, 0, 0, 0);
    for r in 0..h {
        for c in 0..w {
            if pred[r * w + c] {
                if any_within(&truth, r, c) {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
            if truth[r * w + c] {
                if any_within(&pred, r, c) {
                    hit += 1;
                } else {
                    fn_ += 1;
                }
            }
        }
    }
    let recall = if hit + fn_ == 0 { 1.0 } else { hit as f64 / (hit + fn_) as f64 };
    let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let f = if recall + precision > 0.0 {
        2.0 * recall * precision / (recall + precision)
    } else {
        0.0
    };
    (tp, fp, fn_, recall, precision, f)
}

/// Pixels on the nearer side of a 4-neighbor depth jump larger than `tau`.
pub fn nearer_side_scan(depth: &[f64], h: usize, w: usize, tau: f64) -> Vec<u8> {
    let mut out = vec![0u8; h * w];
    for r in 0..h {
        for c in 0..w {
            let here = depth[r * w + c];
            let mut neighbors = Vec::new();
            if r > 0 {
                neighbors.push(depth[(r - 1) * w + c]);
            }
            if r + 1 < h {
                neighbors.push(depth[(r + 1) * w + c]);
            }
            if c > 0 {
                neighbors.push(depth[r * w + c - 1]);
            }
            if c + 1 < w {
                neighbors.push(depth[r * w + c + 1]);
            }
            if neighbors.iter().any(|&nb| nb - here > tau) {
                out[r * w + c] = 1;
            }
        }
    }
    out
}

/// Direct zero-padded "same" convolution of a `(c_in, h, w)` image with a
/// `(c_out, c_in, kh, kw)` kernel; odd kernel sides.
pub fn conv2d_reference(
    x: &[f64],
    (c_in, h, w): (usize, usize, usize),
    weight: &[f64],
    (c_out, kh, kw): (usize, usize, usize),
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (ph, pw) = (kh as isize / 2, kw as isize / 2);
    let mut out = vec![0.0; c_out * h * w];
    for o in 0..c_out {
        for r in 0..h as isize {
            for c in 0..w as isize {
                let mut acc = bias.map_or(0.0, |b| b[o]);
                for i in 0..c_in {
                    for a in 0..kh as isize {
                        for b in 0..kw as isize {
                            let (rr, cc) = (r + a - ph, c + b - pw);
                            if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                                continue;
                            }
                            let wi = ((o * c_in + i) * kh + a as usize) * kw + b as usize;
                            acc += weight[wi] * x[(i * h + rr as usize) * w + cc as usize];
                        }
                    }
                }
                out[(o * h + r as usize) * w + c as usize] = acc;
            }
        }
    }
    out
}

/// Squeeze-excitation weights of a `(c, h, w)` map: mean pool, affine to
/// `c/r` units, ReLU, affine back to `c`, logistic.
pub fn channel_attention_reference(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    w1: &[f64],
    b1: &[f64],
    w2: &[f64],
    b2: &[f64],
) -> Vec<f64> {
    let hidden = b1.len();
    let mut pooled = vec![0.0; c];
    for k in 0..c {
        let mut s = 0.0;
        for i in 0..h * w {
            s += x[k * h * w + i];
        }
        pooled[k] = s / (h * w) as f64;
    }
    let mut z = vec![0.0; hidden];
    for j in 0..hidden {
        let mut s = b1[j];
        for k in 0..c {
            s += w1[j * c + k] * pooled[k];
        }
        z[j] = if s > 0.0 { s } else { 0.0 };
    }
    let mut out = vec![0.0; c];
    for k in 0..c {
        let mut s = b2[k];
        for j in 0..hidden {
            s += w2[k * hidden + j] * z[j];
        }
        out[k] = 1.0 / (1.0 + (-s).exp());
    }
    out
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for i in 0..a.len() {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma).powi(2);
        sbb += (b[i] - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let g = finite_diff_grad(|x| x.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-4).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-6 && (g[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_names_coordinate() {
        let err = finite_diff_grad(|x| if x[1] > 1.0 { f64::NAN } else { 0.0 }, &[0.0, 1.0], 1e-3).unwrap_err();
        assert!(err.to_string().contains("coordinate 1"));
    }

    #[test]
    fn brute_metric_degenerate_conventions() {
        let (_, _, _, r, p, f) = brute_ob_metrics(&[0.0; 4], &[0; 4], 2, 2, 0.7, 0);
        assert_eq!((r, p, f), (1.0, 1.0, 1.0));
        let (tp, fp, fn_, r, p, f) = brute_ob_metrics(&[0.0, 0.9, 0.0, 0.0], &[0, 1, 0, 0], 2, 2, 0.7, 0);
        assert_eq!((tp, fp, fn_, r, p, f), (1, 0, 0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn diff_map_hand_case() {
        let d = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        assert_eq!(diff_map_reference(&d, 3, 3, 1)[4], 1.0);
        assert_eq!(obdcl_reference(&d, &[0., 0., 0., 0., 1., 0., 0., 0., 0.], 3, 3, 1, 1.0, false), 0.0);
    }
}
