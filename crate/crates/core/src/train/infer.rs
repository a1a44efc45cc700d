//! Single-image inference writing depth, boundary and visualization PNGs.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};

use super::checkpoint::Checkpoint;
use super::eval::{predict, Prediction};
use super::stage::restore_model;
use crate::data::{depth_to_millimeters, read_rgb};
use crate::error::{Error, Result};
use crate::model::SSR_PREFIX;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferOutputs {
    /// 16-bit millimeters.
    pub depth: PathBuf,
    /// 8-bit, `round(255 * p)`.
    pub ob: PathBuf,
    pub depth_color: PathBuf,
}

const COLOR_STOPS: [[f64; 3]; 5] = [
    [48.0, 18.0, 59.0],
    [40.0, 140.0, 230.0],
    [60.0, 220.0, 110.0],
    [245.0, 190.0, 40.0],
    [180.0, 20.0, 10.0],
];

/// Piecewise-linear colormap of `t` in [0, 1], near = dark blue.
pub fn colormap(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * (COLOR_STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(COLOR_STOPS.len() - 2);
    let f = t - i as f64;
    let mut out = [0u8; 3];
    for k in 0..3 {
        out[k] = (COLOR_STOPS[i][k] * (1.0 - f) + COLOR_STOPS[i + 1][k] * f).round() as u8;
    }
    out
}

fn save<P, C>(img: &ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save(path).map_err(|e| Error::io(path, e))
}

/// Writes `pred` as `<stem>.depth.png`, `<stem>.ob.png` and
/// `<stem>.depth_color.png` under `out_dir`.
pub fn write_prediction(pred: &Prediction, max_depth: f64, out_dir: &Path, stem: &str) -> Result<InferOutputs> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (h, w) = pred.depth.dim();
    let (hu, wu) = (h as u32, w as u32);
    let mm = pred
        .depth
        .iter()
        // a zero would read back as "no depth"
        .map(|&d| depth_to_millimeters(d as f32).map(|v| v.max(1)))
        .collect::<Result<Vec<u16>>>()?;
    let ob: Vec<u8> = pred.ob_prob.iter().map(|&p| (255.0 * p.clamp(0.0, 1.0)).round() as u8).collect();
    let color: Vec<u8> = pred.depth.iter().flat_map(|&d| colormap(d / max_depth)).collect();
    let out = InferOutputs {
        depth: out_dir.join(format!("{stem}.depth.png")),
        ob: out_dir.join(format!("{stem}.ob.png")),
        depth_color: out_dir.join(format!("{stem}.depth_color.png")),
    };
    save(&ImageBuffer::<Luma<u16>, _>::from_raw(wu, hu, mm).expect("buffer size"), &out.depth)?;
    save(&ImageBuffer::<Luma<u8>, _>::from_raw(wu, hu, ob).expect("buffer size"), &out.ob)?;
    save(&ImageBuffer::<Rgb<u8>, _>::from_raw(wu, hu, color).expect("buffer size"), &out.depth_color)?;
    Ok(out)
}

/// Runs the checkpoint on `image_path`. Refinement is applied when the
/// checkpoint was written by stage two.
pub fn infer(ck: &Checkpoint, image_path: &Path, out_dir: &Path) -> Result<InferOutputs> {
    let rgb = read_rgb(image_path)?;
    let (_, model) = restore_model(ck)?;
    let stage = if ck.stage == 2 && ck.has_group(SSR_PREFIX) { 2 } else { 1 };
    let pred = predict(&model, &rgb, stage)?;
    let stem = image_path
        .file_name()
        .and_then(|s| s.to_str())
        .map(|s| s.split('.').next().unwrap_or(s).to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "image".to_string());
    write_prediction(&pred, ck.config.model.max_depth, out_dir, &stem)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), [48, 18, 59]);
        assert_eq!(colormap(1.0), [180, 20, 10]);
        assert_eq!(colormap(2.0), colormap(1.0));
    }
}
