//! Scene description and seeded procedural placement.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::Vec3;
use super::render::{coverage_counts, Camera};
use crate::error::{config_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    /// Fronto-parallel rectangle.
    Rectangle,
    /// Rectangle tilted about an in-image axis.
    SlantedPlane,
    Sphere,
    /// Axis-aligned box without its camera-facing side.
    OpenBox,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 4] = [
        PrimitiveKind::Rectangle,
        PrimitiveKind::SlantedPlane,
        PrimitiveKind::Sphere,
        PrimitiveKind::OpenBox,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureMode {
    Flat,
    Noise,
    Stripes,
}

impl TextureMode {
    pub const ALL: [TextureMode; 3] = [TextureMode::Flat, TextureMode::Noise, TextureMode::Stripes];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_width: usize,
    pub image_height: usize,
    pub num_primitives: usize,
    pub kinds: Vec<PrimitiveKind>,
    /// `[z_min, z_max]`, meters.
    pub depth_range: [f64; 2],
    pub texture: TextureMode,
    pub fov_deg: f64,
    /// Boundary contrast threshold; bounds the tilt of slanted planes so
    /// that their per-pixel depth slope stays well below it.
    pub contrast_threshold: f64,
    pub rng_seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_width == 0
            || self.image_height == 0
            || !self.image_width.is_multiple_of(32)
            || !self.image_height.is_multiple_of(32)
        {
            return Err(config_err!(
                "image size {}x{} must be a positive multiple of 32",
                self.image_width,
                self.image_height
            ));
        }
        let [z_min, z_max] = self.depth_range;
        if !(z_min > 0.0 && z_min < z_max) {
            return Err(config_err!("depth range needs 0 < z_min < z_max, got [{z_min}, {z_max}]"));
        }
        if self.num_primitives == 0 {
            return Err(config_err!("num_primitives must be >= 1"));
        }
        if self.kinds.is_empty() {
            return Err(config_err!("at least one primitive kind is required"));
        }
        if !(self.fov_deg > 1.0 && self.fov_deg < 170.0) {
            return Err(config_err!("fov_deg must lie in (1, 170)"));
        }
        if self.contrast_threshold <= 0.0 {
            return Err(config_err!("contrast_threshold must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    /// Fronto-parallel rectangle at depth `center.z`.
    Rectangle { center: Vec3, half_w: f64, half_h: f64 },
    /// Rectangle spanned by the orthonormal axes `u`, `v` around `center`.
    SlantedPlane {
        center: Vec3,
        u: Vec3,
        v: Vec3,
        half_u: f64,
        half_v: f64,
    },
    Sphere { center: Vec3, radius: f64 },
    /// Five faces of the box `[min, max]`; the face at `z = min.z` is open.
    OpenBox { min: Vec3, max: Vec3 },
    /// Infinite fronto-parallel plane.
    Wall { z: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub kind: Option<PrimitiveKind>,
    pub shape: Shape,
    pub color: [f64; 3],
    pub texture: TextureMode,
    pub texture_freq: f64,
    pub texture_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub spec: SceneSpec,
    pub camera: Camera,
    /// Back wall at `z_max`; always present so every ray hits a surface.
    pub background: Primitive,
    pub primitives: Vec<Primitive>,
}

const MIN_DEPTH_GAP: f64 = 0.25;
const WALL_CLEARANCE: f64 = 0.3;
const MAX_ATTEMPTS: usize = 64;

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let hue = rng.random_range(0.0..6.0f64);
    let sat = rng.random_range(0.4..0.9);
    let val = rng.random_range(0.6..1.0);
    let c = val * sat;
    let x = c * (1.0 - ((hue % 2.0) - 1.0).abs());
    let (r, g, b) = match hue as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = val - c;
    [r + m, g + m, b + m]
}

fn sample_depths(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut chosen = None;
        for _ in 0..100 {
            let z = rng.random_range(lo..hi);
            if out.iter().all(|&o| (o - z).abs() >= MIN_DEPTH_GAP) {
                chosen = Some(z);
                break;
            }
        }
        out.push(chosen.unwrap_or_else(|| lo + (hi - lo) * (out.len() as f64 + 0.5) / n as f64));
    }
    out
}

/// Builds one primitive whose nearest surface sits near depth `z`, centered
/// on image point `(cu, cv)` with an image-space half extent of `half_px`.
fn make_primitive(
    rng: &mut ChaCha8Rng,
    kind: PrimitiveKind,
    camera: &Camera,
    (cu, cv): (f64, f64),
    half_px: f64,
    z: f64,
    z_far: f64,
    spec: &SceneSpec,
) -> Primitive {
    let f = camera.fx;
    let center_at = |depth: f64| {
        Vec3::new(
            (cu - camera.cx) * depth / camera.fx,
            (cv - camera.cy) * depth / camera.fy,
            depth,
        )
    };
    let aspect = rng.random_range(0.6..1.6f64).sqrt();
    let shape = match kind {
        PrimitiveKind::Rectangle => Shape::Rectangle {
            center: center_at(z),
            half_w: half_px * aspect * z / f,
            half_h: half_px / aspect * z / f,
        },
        PrimitiveKind::SlantedPlane => {
            // keep the per-pixel depth slope under half the contrast threshold
            let half_world = half_px * z / f;
            let far = z + half_world;
            let max_tan = (0.5 * spec.contrast_threshold * f / far).min(1.0);
            let tilt = rng.random_range(0.3..1.0) * max_tan.atan();
            let phi = rng.random_range(0.0..std::f64::consts::PI);
            let axis = Vec3::new(phi.cos(), phi.sin(), 0.0);
            let u = Vec3::new(1.0, 0.0, 0.0).rotated(axis, tilt);
            let v = Vec3::new(0.0, 1.0, 0.0).rotated(axis, tilt);
            // push the center back so the nearest corner stays near z
            let hu = half_world * aspect;
            let hv = half_world / aspect;
            let dz = (u.z * hu).abs() + (v.z * hv).abs();
            Shape::SlantedPlane {
                center: center_at((z + dz).min(z_far - dz).max(z)),
                u,
                v,
                half_u: hu,
                half_v: hv,
            }
        }
        PrimitiveKind::Sphere => {
            let radius = (half_px * z / f).min(0.45 * (z_far - z)).max(1e-3);
            let c = center_at(z + radius);
            Shape::Sphere { center: c, radius }
        }
        PrimitiveKind::OpenBox => {
            let c = center_at(z);
            let hw = half_px * aspect * z / f;
            let hh = half_px / aspect * z / f;
            let depth = rng.random_range(0.3..0.8f64).min(z_far - z).max(0.05);
            Shape::OpenBox {
                min: Vec3::new(c.x - hw, c.y - hh, z),
                max: Vec3::new(c.x + hw, c.y + hh, z + depth),
            }
        }
    };
    Primitive {
        kind: Some(kind),
        shape,
        color: random_color(rng),
        texture: spec.texture,
        texture_freq: rng.random_range(4.0..12.0),
        texture_seed: rng.random(),
    }
}

/// Places `spec.num_primitives` primitives deterministically from
/// `spec.rng_seed`. With two or more primitives at least one pair overlaps
/// in the image at distinct depths.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let camera = Camera::from_fov(spec.image_width, spec.image_height, spec.fov_deg);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let [z_min, z_max] = spec.depth_range;
    let z_far = z_max - WALL_CLEARANCE.min(0.5 * (z_max - z_min));
    let background = Primitive {
        kind: None,
        shape: Shape::Wall { z: z_max },
        color: random_color(&mut rng),
        texture: TextureMode::Noise,
        texture_freq: rng.random_range(1.5..4.0),
        texture_seed: rng.random(),
    };
    let (w, h) = (spec.image_width as f64, spec.image_height as f64);
    let side = w.min(h);

    for _attempt in 0..MAX_ATTEMPTS {
        let depths = sample_depths(&mut rng, spec.num_primitives, z_min, z_far - 0.05);
        let mut centers: Vec<(f64, f64, f64)> = Vec::new();
        let mut primitives = Vec::new();
        for &z in &depths {
            let kind = spec.kinds[rng.random_range(0..spec.kinds.len())];
            let half_px = rng.random_range(0.12..0.32) * side;
            let (cu, cv) = match centers.is_empty() {
                true => (rng.random_range(0.3..0.7) * w, rng.random_range(0.3..0.7) * h),
                false => {
                    let (pu, pv, ph) = centers[rng.random_range(0..centers.len())];
                    let reach = 0.8 * (ph + half_px);
                    let ang = rng.random_range(0.0..std::f64::consts::TAU);
                    let r = rng.random_range(0.2..1.0) * reach;
                    (
                        (pu + r * ang.cos()).clamp(0.1 * w, 0.9 * w),
                        (pv + r * ang.sin()).clamp(0.1 * h, 0.9 * h),
                    )
                }
            };
            centers.push((cu, cv, half_px));
            primitives.push(make_primitive(&mut rng, kind, &camera, (cu, cv), half_px, z, z_far, spec));
        }
        let scene = Scene {
            spec: spec.clone(),
            camera: camera.clone(),
            background: background.clone(),
            primitives,
        };
        if spec.num_primitives < 2 || coverage_counts(&scene).iter().any(|&c| c >= 2) {
            return Ok(scene);
        }
    }
    Err(Error::Generation(format!(
        "no overlapping primitive pair after {MAX_ATTEMPTS} attempts (seed {})",
        spec.rng_seed
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn spec(n: usize, seed: u64) -> SceneSpec {
        SceneSpec {
            image_width: 64,
            image_height: 64,
            num_primitives: n,
            kinds: PrimitiveKind::ALL.to_vec(),
            depth_range: [1.0, 6.0],
            texture: TextureMode::Noise,
            fov_deg: 60.0,
            contrast_threshold: 0.05,
            rng_seed: seed,
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate_scene(&spec(3, 7)).unwrap();
        let b = generate_scene(&spec(3, 7)).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&spec(3, 8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        let mut s = spec(2, 0);
        s.image_width = 70;
        assert!(matches!(generate_scene(&s), Err(Error::Config(_))));
        let mut s = spec(2, 0);
        s.depth_range = [0.0, 3.0];
        assert!(matches!(generate_scene(&s), Err(Error::Config(_))));
        let s = spec(0, 0);
        assert!(matches!(generate_scene(&s), Err(Error::Config(_))));
    }

    #[test]
    fn primitives_stay_inside_depth_range() {
        for seed in 0..40 {
            let s = spec(4, seed);
            let scene = generate_scene(&s).unwrap();
            for p in &scene.primitives {
                let (near, far) = match p.shape {
                    Shape::Rectangle { center, .. } => (center.z, center.z),
                    Shape::SlantedPlane { center, u, v, half_u, half_v } => {
                        let dz = (u.z * half_u).abs() + (v.z * half_v).abs();
                        (center.z - dz, center.z + dz)
                    }
                    Shape::Sphere { center, radius } => (center.z - radius, center.z + radius),
                    Shape::OpenBox { min, max } => (min.z, max.z),
                    Shape::Wall { z } => (z, z),
                };
                assert!(near >= s.depth_range[0] - 1e-9, "{p:?}");
                assert!(far < s.depth_range[1], "{p:?}");
            }
        }
    }

    #[test]
    fn multi_primitive_scenes_overlap() {
        for seed in 0..30 {
            let scene = generate_scene(&spec(2 + (seed as usize % 3), seed)).unwrap();
            assert!(coverage_counts(&scene).iter().any(|&c| c >= 2), "seed {seed}");
        }
    }
}
