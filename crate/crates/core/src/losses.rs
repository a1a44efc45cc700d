//! Training objective: scale-invariant log depth loss, class-balanced
//! boundary cross-entropy with side-output supervision, and the
//! boundary-depth contrast loss that asks predicted depth to jump across
//! ground-truth occlusion boundaries.
//!
//! All functions accept maps shaped `(H, W)`, `(B, H, W)` or `(B, 1, H, W)`
//! and stay differentiable with respect to the prediction.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{LossConfig, ObdclVariant};
use crate::error::{config_err, shape_err, Error, Result};

/// Views a map as `(B, H, W)`.
fn as_bhw(t: &Tensor) -> Result<Tensor> {
    let t = match t.rank() {
        2 => t.unsqueeze(0)?,
        3 => t.clone(),
        4 if t.dim(1)? == 1 => t.squeeze(1)?,
        _ => return Err(shape_err!("expected a (B,1,H,W), (B,H,W) or (H,W) map, got {:?}", t.dims())),
    };
    Ok(t)
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err!("{what}: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

fn check_binary(t: &Tensor, what: &str) -> Result<Vec<f64>> {
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if v.iter().any(|&x| x != 0.0 && x != 1.0) {
        return Err(Error::Domain(format!("{what} must be binary")));
    }
    Ok(v)
}

/// `alpha * sqrt(mean(d^2) - lambda * mean(d)^2)` with
/// `d = ln(pred) - ln(gt)` over all valid pixels of the batch.
///
/// When the radicand is not positive (e.g. `pred == gt`) the loss is 0 and
/// its gradient is defined as 0.
pub fn silog(pred: &Tensor, gt: &Tensor, valid: &Tensor, lambda: f64, alpha: f64) -> Result<Tensor> {
    let pred = as_bhw(pred)?;
    let gt = as_bhw(gt)?.to_dtype(pred.dtype())?;
    let mask = as_bhw(valid)?.to_dtype(pred.dtype())?;
    same_shape(&pred, &gt, "silog pred/gt")?;
    same_shape(&pred, &mask, "silog pred/mask")?;
    let m = check_binary(&mask, "valid mask")?;
    let n: f64 = m.iter().sum();
    if n == 0.0 {
        return Err(Error::Undefined("SILog over an empty mask".into()));
    }
    let p = pred.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let g = gt.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if let Some(i) = (0..m.len()).find(|&i| m[i] == 1.0 && !(p[i] > 0.0 && g[i] > 0.0)) {
        return Err(Error::Domain(format!(
            "non-positive depth on a valid pixel (pred {}, gt {})",
            p[i], g[i]
        )));
    }
    // masked-out pixels are replaced by 1 so the logs stay finite
    let inv = mask.affine(-1.0, 1.0)?;
    let lp = (pred.mul(&mask)? + &inv)?.log()?;
    let lg = (gt.mul(&mask)? + &inv)?.log()?;
    let d = (lp - lg)?.mul(&mask)?;
    let mean_d = (d.sum_all()? / n)?;
    let mean_d2 = (d.sqr()?.sum_all()? / n)?;
    let radicand = (mean_d2 - (mean_d.sqr()? * lambda)?)?;
    let r = radicand.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if r <= 0.0 {
        return Ok(radicand.affine(0.0, 0.0)?);
    }
    Ok((radicand.sqrt()? * alpha)?)
}

/// Class-balanced binary cross-entropy on logits, balanced per image:
/// `-(1/N) [beta * sum_pos ln p + (1 - beta) * sum_neg ln(1 - p)]` with
/// `beta = |neg| / N` and `p` clamped to `[eps, 1 - eps]`; averaged over the
/// batch.
pub fn cce(logit: &Tensor, gt: &Tensor, eps: f64) -> Result<Tensor> {
    let logit = as_bhw(logit)?;
    let gt = as_bhw(gt)?.to_dtype(logit.dtype())?;
    same_shape(&logit, &gt, "cce logit/gt")?;
    let (b, h, w) = logit.dims3()?;
    let n = (h * w) as f64;
    let g = check_binary(&gt, "boundary ground truth")?;
    let betas: Vec<f64> = g
        .chunks(h * w)
        .map(|img| {
            let pos: f64 = img.iter().sum();
            (n - pos) / n
        })
        .collect();
    let dev = logit.device();
    let beta = Tensor::from_vec(betas, (b, 1, 1), dev)?.to_dtype(logit.dtype())?;
    let p = candle_nn::ops::sigmoid(&logit)?.clamp(eps, 1.0 - eps)?;
    let pos = gt.mul(&p.log()?)?.broadcast_mul(&beta)?;
    let neg = gt
        .affine(-1.0, 1.0)?
        .mul(&p.affine(-1.0, 1.0)?.log()?)?
        .broadcast_mul(&beta.affine(-1.0, 1.0)?)?;
    let per_image = (pos + neg)?.sum((1, 2))?.affine(-1.0 / n, 0.0)?;
    Ok(per_image.mean(0)?)
}

fn shifted_indices(len: usize, n: usize, dev: &candle_core::Device) -> Result<(Tensor, Tensor)> {
    let minus: Vec<u32> = (0..len).map(|i| i.saturating_sub(n) as u32).collect();
    let plus: Vec<u32> = (0..len).map(|i| (i + n).min(len - 1) as u32).collect();
    Ok((Tensor::new(minus, dev)?, Tensor::new(plus, dev)?))
}

/// `|D(h-n, w) - D(h+n, w)| + |D(h, w-n) - D(h, w+n)|` with replicate
/// padding at the borders. Output has the `(B, H, W)` layout.
pub fn depth_diff_map(depth: &Tensor, n: usize) -> Result<Tensor> {
    let d = as_bhw(depth)?;
    let (_, h, w) = d.dims3()?;
    if n == 0 || n >= h.min(w) {
        return Err(config_err!("difference offset n = {n} must lie in [1, {})", h.min(w)));
    }
    let dev = d.device();
    let (rm, rp) = shifted_indices(h, n, dev)?;
    let (cm, cp) = shifted_indices(w, n, dev)?;
    let vertical = (d.index_select(&rm, 1)? - d.index_select(&rp, 1)?)?.abs()?;
    let horizontal = (d.index_select(&cm, 2)? - d.index_select(&cp, 2)?)?.abs()?;
    Ok((vertical + horizontal)?)
}

/// Boundary-depth contrast loss: mean over ground-truth boundary pixels of
/// `margin - delta` (literal) or `max(0, margin - delta)` (hinge), per image,
/// averaged over the batch. Images without boundary pixels contribute 0.
pub fn obdcl(depth: &Tensor, ob: &Tensor, n: usize, variant: ObdclVariant, margin: f64) -> Result<Tensor> {
    let d = as_bhw(depth)?;
    let b_mask = as_bhw(ob)?.to_dtype(d.dtype())?;
    same_shape(&d, &b_mask, "obdcl depth/boundary")?;
    let (b, h, w) = d.dims3()?;
    let g = check_binary(&b_mask, "boundary map")?;
    let inv_counts: Vec<f64> = g
        .chunks(h * w)
        .map(|img| {
            let c: f64 = img.iter().sum();
            if c > 0.0 {
                1.0 / c
            } else {
                0.0
            }
        })
        .collect();
    let delta = depth_diff_map(&d, n)?;
    let short = delta.affine(-1.0, margin)?;
    let short = match variant {
        ObdclVariant::Literal => short,
        ObdclVariant::Hinge => short.relu()?,
    };
    let per_image = b_mask.mul(&short)?.sum((1, 2))?;
    let scale = Tensor::from_vec(inv_counts, b, d.device())?.to_dtype(d.dtype())?;
    Ok(per_image.mul(&scale)?.mean(0)?)
}

/// Mean of `delta` over boundary pixels pooled across the batch, or `None`
/// without boundary pixels.
pub fn mean_delta_on_boundary(depth: &Tensor, ob: &Tensor, n: usize) -> Result<Option<f64>> {
    let delta = depth_diff_map(depth, n)?.to_dtype(DType::F64)?;
    let b = as_bhw(ob)?.to_dtype(DType::F64)?;
    let count = b.sum_all()?.to_scalar::<f64>()?;
    if count == 0.0 {
        return Ok(None);
    }
    Ok(Some(delta.mul(&b)?.sum_all()?.to_scalar::<f64>()? / count))
}

/// Per-term loss values of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_d: f64,
    pub l_ob: f64,
    pub l_c: f64,
    pub total: f64,
    /// Cross-entropy of each supervised boundary map, final map first.
    pub ob_terms: Vec<f64>,
}

/// Differentiable loss terms.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub l_d: Tensor,
    pub l_ob: Tensor,
    pub l_c: Tensor,
    pub total: Tensor,
    pub ob_terms: Vec<Tensor>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

impl LossTerms {
    pub fn breakdown(&self) -> Result<LossBreakdown> {
        Ok(LossBreakdown {
            l_d: scalar(&self.l_d)?,
            l_ob: scalar(&self.l_ob)?,
            l_c: scalar(&self.l_c)?,
            total: scalar(&self.total)?,
            ob_terms: self.ob_terms.iter().map(scalar).collect::<Result<_>>()?,
        })
    }
}

/// `w_d * L_D + w_ob * L_OB + w_c * L_C`.
///
/// `ob_logits` holds the final boundary logit map followed by any side
/// outputs, all at the ground-truth resolution. The contrast term uses the
/// predicted depth against the ground-truth boundary map.
pub fn total_loss(
    depth: &Tensor,
    ob_logits: &[Tensor],
    gt_depth: &Tensor,
    gt_ob: &Tensor,
    valid: &Tensor,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    if ob_logits.is_empty() {
        return Err(config_err!("at least one boundary map is required"));
    }
    let weights: Vec<f64> = if cfg.ob_map_weights.is_empty() {
        vec![1.0; ob_logits.len()]
    } else if cfg.ob_map_weights.len() >= ob_logits.len() {
        cfg.ob_map_weights[..ob_logits.len()].to_vec()
    } else {
        return Err(config_err!(
            "{} boundary map weights for {} maps",
            cfg.ob_map_weights.len(),
            ob_logits.len()
        ));
    };
    let wsum: f64 = weights.iter().sum();
    if wsum <= 0.0 {
        return Err(config_err!("boundary map weights must have a positive sum"));
    }
    let l_d = silog(depth, gt_depth, valid, cfg.silog_lambda, cfg.silog_alpha)?;
    let ob_terms = ob_logits
        .iter()
        .map(|l| cce(l, gt_ob, cfg.cce_eps))
        .collect::<Result<Vec<_>>>()?;
    let mut l_ob = (&ob_terms[0] * (weights[0] / wsum))?;
    for (t, w) in ob_terms.iter().zip(&weights).skip(1) {
        l_ob = (l_ob + (t * (w / wsum))?)?;
    }
    let l_c = obdcl(depth, gt_ob, cfg.obdcl_n, cfg.obdcl_variant, cfg.obdcl_margin)?;
    let total = ((&l_d * cfg.w_d)? + (&l_ob * cfg.w_ob)?)?;
    let total = if cfg.w_c != 0.0 { (total + (&l_c * cfg.w_c)?)? } else { total };
    Ok(LossTerms {
        l_d,
        l_ob,
        l_c,
        total,
        ob_terms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t2(rows: &[&[f64]]) -> Tensor {
        let h = rows.len();
        let w = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(flat, (h, w), &Device::Cpu).unwrap()
    }

    fn val(t: &Tensor) -> f64 {
        scalar(t).unwrap()
    }

    #[test]
    fn silog_closed_forms() {
        let gt = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let ones = gt.ones_like().unwrap();
        assert_eq!(val(&silog(&gt, &gt, &ones, 0.85, 10.0).unwrap()), 0.0);
        let doubled = (&gt * 2.0).unwrap();
        let expect = 10.0 * 2f64.ln() * 0.15f64.sqrt();
        assert!((val(&silog(&doubled, &gt, &ones, 0.85, 10.0).unwrap()) - expect).abs() < 1e-9);
        // radicand is zero up to rounding, so the root is at most ~1e-7
        assert!(val(&silog(&doubled, &gt, &ones, 1.0, 10.0).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn silog_errors() {
        let gt = t2(&[&[1.0, 2.0]]);
        let zeros = gt.zeros_like().unwrap();
        assert!(matches!(silog(&gt, &gt, &zeros, 0.85, 10.0), Err(Error::Undefined(_))));
        let bad = t2(&[&[0.0, 2.0]]);
        assert!(matches!(silog(&bad, &gt, &gt.ones_like().unwrap(), 0.85, 10.0), Err(Error::Domain(_))));
    }

    #[test]
    fn cce_two_by_two() {
        let logit = t2(&[&[0.0, 0.0], &[0.0, 0.0]]);
        let gt = t2(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let expect = 0.375 * 2f64.ln();
        assert!((val(&cce(&logit, &gt, 1e-6).unwrap()) - expect).abs() < 1e-12);
        let neg = gt.zeros_like().unwrap();
        assert!(val(&cce(&logit, &neg, 1e-6).unwrap()).abs() < 1e-12);
        let sat = t2(&[&[40.0, -40.0], &[-40.0, -40.0]]);
        assert!(val(&cce(&sat, &gt, 1e-6).unwrap()) < 1e-5);
        let non_binary = t2(&[&[0.5, 0.0], &[0.0, 0.0]]);
        assert!(matches!(cce(&logit, &non_binary, 1e-6), Err(Error::Domain(_))));
    }

    #[test]
    fn diff_map_examples() {
        let d = t2(&[&[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]]);
        let delta = depth_diff_map(&d, 1).unwrap();
        let v = delta.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(v[4], 1.0);
        let shifted = (&d + 3.5).unwrap();
        let v2 = depth_diff_map(&shifted, 1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(v, v2);
        assert!(matches!(depth_diff_map(&d, 3), Err(Error::Config(_))));
        let b = t2(&[&[0.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 0.0]]);
        assert_eq!(val(&obdcl(&d, &b, 1, ObdclVariant::Literal, 1.0).unwrap()), 0.0);
        let flat = d.ones_like().unwrap();
        assert_eq!(val(&obdcl(&flat, &b, 1, ObdclVariant::Literal, 1.0).unwrap()), 1.0);
        assert_eq!(val(&obdcl(&d, &b.zeros_like().unwrap(), 1, ObdclVariant::Hinge, 1.0).unwrap()), 0.0);
    }

    #[test]
    fn total_recomposes() {
        let gt = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let pred = t2(&[&[1.5, 2.0], &[2.0, 5.0]]);
        let ob = t2(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let logit = t2(&[&[0.3, -0.2], &[0.1, 0.5]]);
        let cfg = LossConfig::default();
        let terms = total_loss(&pred, &[logit.clone(), logit], &gt, &ob, &gt.ones_like().unwrap(), &cfg).unwrap();
        let b = terms.breakdown().unwrap();
        let recomposed = cfg.w_d * b.l_d + cfg.w_ob * b.l_ob + cfg.w_c * b.l_c;
        assert!((b.total - recomposed).abs() <= 1e-12 * recomposed.abs().max(1.0));
        assert_eq!(b.ob_terms.len(), 2);
    }
}
