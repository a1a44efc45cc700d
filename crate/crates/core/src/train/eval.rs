//! Full-resolution evaluation and the JSON report it produces.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::batch::LoadedSplit;
use super::checkpoint::Checkpoint;
use super::stage::restore_model;
use crate::config::ExperimentConfig;
use crate::data::{DatasetManifest, Split};
use crate::error::{config_err, Error, Result};
use crate::layers::pad_to_multiple;
use crate::losses::mean_delta_on_boundary;
use crate::metrics::{depth_metrics, mean_depth_metrics, mean_ob_metrics, ob_metrics, DepthMetrics, DepthRange, ObMetrics};
use crate::model::{image_tensor, Modot};

pub const REPORT_FORMAT: &str = "modot-report";

/// Thresholds of the precision/recall sweep.
pub fn pr_thresholds() -> Vec<f64> {
    (1..20).map(|k| k as f64 * 0.05).collect()
}

/// Replicate padding applied to reach a multiple of 32 and removed again.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Meters.
    pub depth: Array2<f64>,
    pub ob_prob: Array2<f64>,
    pub padding: Option<Padding>,
}

fn to_array2(t: &Tensor) -> Result<Array2<f64>> {
    let (_, _, h, w) = t.dims4()?;
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(Array2::from_shape_vec((h, w), v).expect("tensor has h*w elements"))
}

/// Runs the network on one `H x W x 3` image, padding to a multiple of 32
/// when needed. Stage 2 applies the refinement stage on top of stage one.
pub fn predict(model: &Modot, rgb: &Array3<u8>, stage: u8) -> Result<Prediction> {
    let (h, w, _) = rgb.dim();
    let image = image_tensor(&[rgb], DType::F32, &Device::Cpu)?;
    let (padded, (top, left)) = pad_to_multiple(&image, 32)?;
    let (_, _, ph, pw) = padded.dims4()?;
    let padding = (ph != h || pw != w).then_some(Padding {
        top,
        bottom: ph - h - top,
        left,
        right: pw - w - left,
    });
    let s1 = model.stage1_forward(&padded)?;
    let (depth, ob) = match stage {
        1 => (s1.depth.clone(), s1.ob_prob()?),
        2 => {
            let s2 = model.ssr_forward(&padded, &s1)?;
            (s2.depth.clone(), s2.ob_prob()?)
        }
        s => return Err(config_err!("unknown stage {s}")),
    };
    let crop = |t: &Tensor| -> Result<Array2<f64>> { to_array2(&t.narrow(2, top, h)?.narrow(3, left, w)?) };
    Ok(Prediction {
        depth: crop(&depth)?,
        ob_prob: crop(&ob)?,
        padding,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
    pub fscore: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub sample_id: String,
    pub depth: DepthMetrics,
    pub ob: ObMetrics,
    pub padding: Option<Padding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format: String,
    pub stage: u8,
    pub split: Split,
    /// Ground truth was injected as the prediction.
    pub oracle: bool,
    pub checkpoint_step: usize,
    pub checkpoint_checksums: BTreeMap<String, String>,
    pub config: ExperimentConfig,
    pub num_images: usize,
    /// Per-image metrics averaged over the split.
    pub depth: DepthMetrics,
    pub ob: ObMetrics,
    /// Mean cross-boundary depth contrast of the prediction over ground-truth
    /// boundary pixels.
    pub mean_boundary_delta: Option<f64>,
    pub pr_curve: Vec<PrPoint>,
    pub images: Vec<ImageReport>,
}

impl Report {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: Report = serde_json::from_str(&text).map_err(|e| Error::io(path, e))?;
        if r.format != REPORT_FORMAT {
            return Err(Error::io(path, "not an evaluation report"));
        }
        Ok(r)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    /// Defaults to the stage that wrote the checkpoint.
    pub stage: Option<u8>,
    pub split: Split,
    /// Score the ground truth against itself instead of running the model.
    pub oracle: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            stage: None,
            split: Split::Test,
            oracle: false,
        }
    }
}

/// Evaluates `ck` on one split of `manifest` at full resolution.
pub fn evaluate(ck: &Checkpoint, manifest: &DatasetManifest, opts: EvalOptions) -> Result<Report> {
    let stage = opts.stage.unwrap_or(ck.stage);
    if stage == 2 && !ck.has_group(crate::model::SSR_PREFIX) {
        return Err(config_err!("checkpoint has no refinement-stage parameters"));
    }
    let split = LoadedSplit::load(manifest, opts.split)?;
    if split.is_empty() {
        return Err(Error::io(&manifest.root, format!("{} split is empty", opts.split.dir_name())));
    }
    let model = if opts.oracle { None } else { Some(restore_model(ck)?.1) };
    let ecfg = &ck.config.eval;
    let range = DepthRange {
        min_depth: ecfg.min_eval_depth,
        max_depth: ecfg.depth_cap,
    };
    let thresholds = pr_thresholds();
    let mut images = Vec::with_capacity(split.len());
    let mut sweeps: Vec<Vec<ObMetrics>> = vec![Vec::new(); thresholds.len()];
    let (mut delta_sum, mut delta_count) = (0.0, 0.0);
    for (id, s) in split.ids.iter().zip(&split.samples) {
        let pred = match &model {
            Some(m) => predict(m, &s.rgb, stage)?,
            None => Prediction {
                depth: s.depth.mapv(|v| v as f64),
                ob_prob: s.ob_mask.mapv(|v| v as f64),
                padding: None,
            },
        };
        let gt_depth = s.depth.mapv(|v| v as f64);
        let dm = depth_metrics(pred.depth.view(), gt_depth.view(), s.valid_mask.view(), range)?;
        let om = ob_metrics(pred.ob_prob.view(), s.ob_mask.view(), ecfg.ob_threshold, ecfg.tolerance_radius)?;
        for (k, &t) in thresholds.iter().enumerate() {
            sweeps[k].push(ob_metrics(pred.ob_prob.view(), s.ob_mask.view(), t, ecfg.tolerance_radius)?);
        }
        let (h, w) = pred.depth.dim();
        let d = Tensor::from_vec(pred.depth.iter().copied().collect::<Vec<_>>(), (h, w), &Device::Cpu)?;
        let b = Tensor::from_vec(s.ob_mask.mapv(|v| v as f64).into_raw_vec_and_offset().0, (h, w), &Device::Cpu)?;
        if let Some(md) = mean_delta_on_boundary(&d, &b, ck.config.loss.obdcl_n)? {
            let count = s.ob_mask.iter().filter(|&&v| v == 1).count() as f64;
            delta_sum += md * count;
            delta_count += count;
        }
        images.push(ImageReport {
            sample_id: id.clone(),
            depth: dm,
            ob: om,
            padding: pred.padding,
        });
    }
    let depth = mean_depth_metrics(&images.iter().map(|r| r.depth).collect::<Vec<_>>()).expect("non-empty");
    let ob = mean_ob_metrics(&images.iter().map(|r| r.ob).collect::<Vec<_>>()).expect("non-empty");
    let pr_curve = thresholds
        .iter()
        .zip(&sweeps)
        .map(|(&threshold, ms)| {
            let m = mean_ob_metrics(ms).expect("non-empty");
            PrPoint {
                threshold,
                recall: m.recall,
                precision: m.precision,
                fscore: m.fscore,
            }
        })
        .collect();
    Ok(Report {
        format: REPORT_FORMAT.to_string(),
        stage,
        split: opts.split,
        oracle: opts.oracle,
        checkpoint_step: ck.step,
        checkpoint_checksums: ck.checksums.clone(),
        config: ck.config.clone(),
        num_images: images.len(),
        depth,
        ob,
        mean_boundary_delta: (delta_count > 0.0).then(|| delta_sum / delta_count),
        pr_curve,
        images,
    })
}
