//! Procedural scenes of layered primitives rendered into paired RGB, metric
//! depth and occlusion-boundary annotations, plus on-disk persistence.

mod boundary;
mod geometry;
mod io;
mod manifest;
mod render;
mod scene;
mod texture;

pub use boundary::{derive_ob_from_depth, BoundaryRule, ObDerivation};
pub use geometry::Vec3;
pub use io::{depth_to_millimeters, read_rgb, read_sample, write_sample, SamplePaths, DEPTH_SCALE};
pub use manifest::{build_manifest, DatasetManifest, ManifestEntry, ManifestError, Split, MANIFEST_VERSION};
pub use render::{render, render_sample, Camera, Rendering};
pub use scene::{generate_scene, Primitive, PrimitiveKind, Scene, SceneSpec, Shape, TextureMode};

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::config::DataConfig;
use crate::error::{Error, Result};

/// One training/evaluation item.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `H x W x 3`, 8 bits per channel.
    pub rgb: Array3<u8>,
    /// Meters; strictly positive wherever `valid_mask` is 1.
    pub depth: Array2<f32>,
    /// Binary occlusion-boundary map.
    pub ob_mask: Array2<u8>,
    pub valid_mask: Array2<u8>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.depth.nrows()
    }

    pub fn width(&self) -> usize {
        self.depth.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.depth.dim();
        let (rh, rw, rc) = self.rgb.dim();
        if (rh, rw) != (h, w) || rc != 3 || self.ob_mask.dim() != (h, w) || self.valid_mask.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "sample arrays disagree: rgb {:?}, depth {:?}, ob {:?}, valid {:?}",
                self.rgb.dim(),
                self.depth.dim(),
                self.ob_mask.dim(),
                self.valid_mask.dim()
            )));
        }
        for ((&d, &v), &b) in self.depth.iter().zip(self.valid_mask.iter()).zip(self.ob_mask.iter()) {
            if v > 1 || b > 1 {
                return Err(Error::Domain("masks must be binary".into()));
            }
            if v == 1 && !(d > 0.0 && d.is_finite()) {
                return Err(Error::Domain(format!("depth {d} on a valid pixel")));
            }
            if b == 1 && v == 0 {
                return Err(Error::Domain("ob_mask pixel outside valid_mask".into()));
            }
        }
        Ok(())
    }

    /// Horizontal mirror of every array.
    pub fn flipped(&self) -> Sample {
        use ndarray::s;
        Sample {
            rgb: self.rgb.slice(s![.., ..;-1, ..]).to_owned(),
            depth: self.depth.slice(s![.., ..;-1]).to_owned(),
            ob_mask: self.ob_mask.slice(s![.., ..;-1]).to_owned(),
            valid_mask: self.valid_mask.slice(s![.., ..;-1]).to_owned(),
        }
    }

    /// `height x width` window with top-left corner `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Sample {
        use ndarray::s;
        Sample {
            rgb: self.rgb.slice(s![top..top + height, left..left + width, ..]).to_owned(),
            depth: self.depth.slice(s![top..top + height, left..left + width]).to_owned(),
            ob_mask: self.ob_mask.slice(s![top..top + height, left..left + width]).to_owned(),
            valid_mask: self.valid_mask.slice(s![top..top + height, left..left + width]).to_owned(),
        }
    }
}

/// Per-sample scene spec derived from the dataset config.
pub fn scene_spec_for(cfg: &DataConfig, seed: u64, index: usize) -> SceneSpec {
    use rand::{Rng, SeedableRng};
    let sample_seed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(sample_seed);
    let num_primitives = rng.random_range(cfg.num_primitives[0]..=cfg.num_primitives[1]);
    let texture = cfg.textures[rng.random_range(0..cfg.textures.len())];
    SceneSpec {
        image_width: cfg.image_width,
        image_height: cfg.image_height,
        num_primitives,
        kinds: cfg.kinds.clone(),
        depth_range: cfg.depth_range,
        texture,
        fov_deg: cfg.fov_deg,
        contrast_threshold: cfg.contrast_threshold,
        rng_seed: sample_seed,
    }
}

pub fn boundary_rule_for(cfg: &DataConfig) -> BoundaryRule {
    BoundaryRule {
        contrast_threshold: cfg.contrast_threshold,
        rim_angle_deg: cfg.rim_angle_deg,
    }
}

/// Generates `cfg.num_samples` samples under `root`, splits them and writes
/// `manifest.json`.
pub fn generate_dataset(cfg: &DataConfig, seed: u64, root: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let rule = boundary_rule_for(cfg);
    for i in 0..cfg.num_samples {
        let spec = scene_spec_for(cfg, seed, i);
        let scene = generate_scene(&spec)?;
        let sample = render_sample(&scene, &rule)?;
        write_sample(&sample, &SamplePaths::in_dir(root, &sample_id(i)))?;
    }
    let generator = serde_json::to_value(cfg).expect("data config serializes");
    let manifest = build_manifest(root, cfg.split_fraction, seed, generator)?;
    manifest.save()?;
    Ok(manifest)
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}
