//! Occlusion-boundary annotation from rendered depth and normals.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::geometry::Vec3;
use super::render::Camera;
use crate::error::{config_err, shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryRule {
    /// Minimum 4-neighbor depth jump (meters) that counts as a discontinuity.
    pub contrast_threshold: f64,
    /// A pixel is a rim pixel when its normal is within this many degrees
    /// of perpendicular to the view ray.
    pub rim_angle_deg: f64,
}

impl Default for BoundaryRule {
    fn default() -> Self {
        Self {
            contrast_threshold: 0.05,
            rim_angle_deg: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObDerivation {
    /// Union of both rules.
    pub mask: Array2<u8>,
    /// Pixels on the nearer side of a depth jump above the threshold.
    pub discontinuity: Array2<u8>,
    /// Grazing-angle pixels.
    pub rim: Array2<u8>,
}

const NEIGHBORS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

/// Marks a pixel when a 4-neighbor lies more than `contrast_threshold`
/// farther away (the boundary belongs to the occluder), or when the view ray
/// grazes its surface.
pub fn derive_ob_from_depth(
    depth: &Array2<f64>,
    normals: &Array3<f64>,
    camera: &Camera,
    rule: &BoundaryRule,
) -> Result<ObDerivation> {
    if !(rule.contrast_threshold > 0.0) {
        return Err(config_err!(
            "contrast threshold must be positive, got {}",
            rule.contrast_threshold
        ));
    }
    let (h, w) = depth.dim();
    if normals.dim() != (h, w, 3) {
        return Err(shape_err!("normals {:?} do not match depth {:?}", normals.dim(), depth.dim()));
    }
    if (camera.height, camera.width) != (h, w) {
        return Err(shape_err!(
            "camera is {}x{}, depth is {h}x{w}",
            camera.height,
            camera.width
        ));
    }
    let tau = rule.contrast_threshold;
    let sin_eps = rule.rim_angle_deg.to_radians().sin();
    let mut discontinuity = Array2::zeros((h, w));
    let mut rim = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let d = depth[[r, c]];
            let jump = NEIGHBORS.iter().any(|&(dr, dc)| {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                nr >= 0
                    && nc >= 0
                    && (nr as usize) < h
                    && (nc as usize) < w
                    && depth[[nr as usize, nc as usize]] - d > tau
            });
            if jump {
                discontinuity[[r, c]] = 1u8;
            }
            let n = Vec3::new(normals[[r, c, 0]], normals[[r, c, 1]], normals[[r, c, 2]]);
            let view = camera.ray(r, c).normalized();
            if n.norm() > 0.0 && n.normalized().dot(view).abs() < sin_eps {
                rim[[r, c]] = 1u8;
            }
        }
    }
    let mask = ndarray::Zip::from(&discontinuity)
        .and(&rim)
        .map_collect(|&a: &u8, &b: &u8| a | b);
    Ok(ObDerivation {
        mask,
        discontinuity,
        rim,
    })
}
