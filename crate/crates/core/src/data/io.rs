//! PNG persistence of samples: 8-bit RGB, 16-bit millimeter depth, 0/255 OB.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3};

use super::Sample;
use crate::error::{Error, Result};

/// Stored depth integer per meter.
pub const DEPTH_SCALE: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplePaths {
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub ob: PathBuf,
}

impl SamplePaths {
    pub fn in_dir(dir: &Path, id: &str) -> Self {
        Self {
            rgb: dir.join(format!("{id}.rgb.png")),
            depth: dir.join(format!("{id}.depth.png")),
            ob: dir.join(format!("{id}.ob.png")),
        }
    }

    pub fn all(&self) -> [&PathBuf; 3] {
        [&self.rgb, &self.depth, &self.ob]
    }
}

pub fn depth_to_millimeters(meters: f32) -> Result<u16> {
    let mm = (meters as f64 * DEPTH_SCALE).round();
    if !mm.is_finite() || mm < 0.0 || mm > u16::MAX as f64 {
        return Err(Error::Range(format!(
            "depth {meters} m does not fit 16-bit millimeters (max 65.535 m)"
        )));
    }
    Ok(mm as u16)
}

fn save<P, C>(img: &ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path).map_err(|e| Error::io(path, e))
}

pub fn write_sample(sample: &Sample, paths: &SamplePaths) -> Result<()> {
    sample.validate()?;
    let (h, w) = sample.depth.dim();
    let (hu, wu) = (h as u32, w as u32);
    let mm = sample
        .depth
        .iter()
        .zip(sample.valid_mask.iter())
        .map(|(&d, &v)| if v == 1 { depth_to_millimeters(d) } else { Ok(0) })
        .collect::<Result<Vec<u16>>>()?;
    let rgb: Vec<u8> = sample.rgb.iter().copied().collect();
    let ob: Vec<u8> = sample.ob_mask.iter().map(|&b| b * 255).collect();
    save(&ImageBuffer::<Rgb<u8>, _>::from_raw(wu, hu, rgb).expect("rgb buffer size"), &paths.rgb)?;
    save(&ImageBuffer::<Luma<u16>, _>::from_raw(wu, hu, mm).expect("depth buffer size"), &paths.depth)?;
    save(&ImageBuffer::<Luma<u8>, _>::from_raw(wu, hu, ob).expect("ob buffer size"), &paths.ob)?;
    Ok(())
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::io(path, e))
}

pub fn read_rgb(path: &Path) -> Result<Array3<u8>> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw()).map_err(|e| Error::io(path, e))
}

/// Reads a sample; pixels with stored depth 0 are marked invalid.
pub fn read_sample(paths: &SamplePaths) -> Result<Sample> {
    let rgb = read_rgb(&paths.rgb)?;
    let depth_img = match open(&paths.depth)? {
        image::DynamicImage::ImageLuma16(b) => b,
        other => {
            return Err(Error::io(
                &paths.depth,
                format!("expected 16-bit grayscale depth, got {:?}", other.color()),
            ))
        }
    };
    let ob_img = open(&paths.ob)?.to_luma8();
    let (w, h) = depth_img.dimensions();
    let (h, w) = (h as usize, w as usize);
    if ob_img.dimensions() != depth_img.dimensions() || rgb.dim() != (h, w, 3) {
        return Err(Error::io(&paths.depth, "rgb/depth/ob sizes disagree"));
    }
    let raw = depth_img.into_raw();
    let depth = Array2::from_shape_fn((h, w), |(r, c)| (raw[r * w + c] as f64 / DEPTH_SCALE) as f32);
    let valid_mask = Array2::from_shape_fn((h, w), |(r, c)| (raw[r * w + c] > 0) as u8);
    let ob_raw = ob_img.into_raw();
    if let Some(v) = ob_raw.iter().find(|&&v| v != 0 && v != 255) {
        return Err(Error::io(&paths.ob, format!("non-binary OB value {v}")));
    }
    let ob_mask = Array2::from_shape_fn((h, w), |(r, c)| (ob_raw[r * w + c] == 255) as u8 & valid_mask[[r, c]]);
    Ok(Sample {
        rgb,
        depth,
        ob_mask,
        valid_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{boundary_rule_for, generate_scene, render_sample, scene_spec_for};

    #[test]
    fn millimeter_encoding() {
        assert_eq!(depth_to_millimeters(2.5).unwrap(), 2500);
        assert_eq!(depth_to_millimeters(65.535).unwrap(), 65535);
        assert!(matches!(depth_to_millimeters(65.6), Err(Error::Range(_))));
    }

    #[test]
    fn generated_sample_round_trips() {
        let cfg = crate::config::DataConfig::default();
        let scene = generate_scene(&scene_spec_for(&cfg, 1, 0)).unwrap();
        let s = render_sample(&scene, &boundary_rule_for(&cfg)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = SamplePaths::in_dir(dir.path(), "a");
        write_sample(&s, &paths).unwrap();
        let back = read_sample(&paths).unwrap();
        assert_eq!(back.rgb, s.rgb);
        assert_eq!(back.ob_mask, s.ob_mask);
        assert_eq!(back.valid_mask, s.valid_mask);
        let max_err = back
            .depth
            .iter()
            .zip(s.depth.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err < 0.0005, "{max_err}");
    }

    #[test]
    fn out_of_range_depth_is_rejected() {
        let s = Sample {
            rgb: Array3::zeros((2, 2, 3)),
            depth: Array2::from_elem((2, 2), 70.0),
            ob_mask: Array2::zeros((2, 2)),
            valid_mask: Array2::ones((2, 2)),
        };
        let dir = tempfile::tempdir().unwrap();
        let err = write_sample(&s, &SamplePaths::in_dir(dir.path(), "x")).unwrap_err();
        assert!(matches!(err, Error::Range(_)));
    }

    #[test]
    fn missing_file_names_its_path() {
        let dir = tempfile::tempdir().unwrap();
        let paths = SamplePaths::in_dir(dir.path(), "none");
        match read_sample(&paths) {
            Err(Error::Io { path, .. }) => assert_eq!(path, paths.rgb),
            other => panic!("{other:?}"),
        }
    }
}
