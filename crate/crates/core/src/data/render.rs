//! Ray casting of analytic scenes into depth, normals, ids and shaded RGB.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::boundary::{derive_ob_from_depth, BoundaryRule};
use super::geometry::Vec3;
use super::scene::{Primitive, Scene, Shape, TextureMode};
use super::texture::fractal_noise;
use super::Sample;
use crate::error::{Error, Result};

/// Pinhole camera at the origin looking down +z, image y pointing down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Camera {
    /// Square pixels, horizontal field of view `fov_deg`.
    pub fn from_fov(width: usize, height: usize, fov_deg: f64) -> Self {
        let f = 0.5 * width as f64 / (0.5 * fov_deg.to_radians()).tan();
        Self {
            width,
            height,
            fx: f,
            fy: f,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
        }
    }

    /// Ray through the center of pixel `(row, col)`, scaled so that `z = 1`.
    /// The ray parameter of a hit is therefore its z-depth.
    pub fn ray(&self, row: usize, col: usize) -> Vec3 {
        Vec3::new(
            (col as f64 + 0.5 - self.cx) / self.fx,
            (row as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        )
    }
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    t: f64,
    normal: Vec3,
}

fn facing(normal: Vec3, dir: Vec3) -> Vec3 {
    if normal.dot(dir) > 0.0 {
        -normal
    } else {
        normal
    }
}

fn intersect_sphere(center: Vec3, radius: f64, dir: Vec3) -> Option<Hit> {
    let a = dir.dot(dir);
    let b = -2.0 * dir.dot(center);
    let c = center.dot(center) - radius * radius;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = (-b - sq) / (2.0 * a);
    let t1 = (-b + sq) / (2.0 * a);
    let t = if t0 > 1e-9 { t0 } else if t1 > 1e-9 { t1 } else { return None };
    let normal = (dir * t - center) * (1.0 / radius);
    Some(Hit { t, normal: facing(normal, dir) })
}

/// Planar patch through `origin` spanned by unit axes `u`, `v`.
fn intersect_patch(origin: Vec3, u: Vec3, v: Vec3, hu: f64, hv: f64, dir: Vec3) -> Option<Hit> {
    let n = u.cross(v);
    let denom = n.dot(dir);
    if denom.abs() < 1e-12 {
        return None;
    }
    let t = n.dot(origin) / denom;
    if t <= 1e-9 {
        return None;
    }
    let rel = dir * t - origin;
    if rel.dot(u).abs() > hu || rel.dot(v).abs() > hv {
        return None;
    }
    Some(Hit { t, normal: facing(n, dir) })
}

fn intersect_open_box(min: Vec3, max: Vec3, dir: Vec3) -> Option<Hit> {
    let c = (min + max) * 0.5;
    let h = (max - min) * 0.5;
    let ex = Vec3::new(1.0, 0.0, 0.0);
    let ey = Vec3::new(0.0, 1.0, 0.0);
    let ez = Vec3::new(0.0, 0.0, 1.0);
    let faces = [
        (Vec3::new(c.x, c.y, max.z), ex, ey, h.x, h.y),
        (Vec3::new(min.x, c.y, c.z), ey, ez, h.y, h.z),
        (Vec3::new(max.x, c.y, c.z), ey, ez, h.y, h.z),
        (Vec3::new(c.x, min.y, c.z), ez, ex, h.z, h.x),
        (Vec3::new(c.x, max.y, c.z), ez, ex, h.z, h.x),
    ];
    faces
        .iter()
        .filter_map(|&(o, u, v, hu, hv)| intersect_patch(o, u, v, hu, hv, dir))
        .min_by(|a, b| a.t.total_cmp(&b.t))
}

fn intersect(shape: &Shape, dir: Vec3) -> Option<Hit> {
    match *shape {
        Shape::Rectangle { center, half_w, half_h } => intersect_patch(
            center,
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            half_w,
            half_h,
            dir,
        ),
        Shape::SlantedPlane { center, u, v, half_u, half_v } => {
            intersect_patch(center, u, v, half_u, half_v, dir)
        }
        Shape::Sphere { center, radius } => intersect_sphere(center, radius, dir),
        Shape::OpenBox { min, max } => intersect_open_box(min, max, dir),
        Shape::Wall { z } => (z > 0.0).then(|| Hit {
            t: z / dir.z,
            normal: Vec3::new(0.0, 0.0, -1.0),
        }),
    }
}

/// Raw per-pixel render products.
#[derive(Debug, Clone)]
pub struct Rendering {
    /// z-depth in meters.
    pub depth: Array2<f64>,
    /// Unit surface normals facing the camera, `H x W x 3`.
    pub normals: Array3<f64>,
    /// 0 for the background wall, `i + 1` for primitive `i`.
    pub ids: Array2<u32>,
    pub rgb: Array3<u8>,
}

fn texture_factor(p: &Primitive, point: Vec3) -> f64 {
    let q = point * p.texture_freq;
    match p.texture {
        TextureMode::Flat => 1.0,
        TextureMode::Noise => 0.55 + 0.45 * fractal_noise(q, p.texture_seed),
        TextureMode::Stripes => {
            let phase = (p.texture_seed % 628) as f64 * 0.01;
            if (q.x + 0.5 * q.y + phase).sin() > 0.0 {
                1.0
            } else {
                0.6
            }
        }
    }
}

fn shade(p: &Primitive, point: Vec3, normal: Vec3, z_max: f64) -> [u8; 3] {
    let to_light = Vec3::new(-0.4, -0.6, -1.0).normalized();
    let lambert = 0.35 + 0.65 * normal.dot(to_light).max(0.0);
    let tex = texture_factor(p, point);
    let fog = (-0.12 * point.z / z_max.max(1e-6) * 4.0).exp();
    let fog_color = 0.75;
    let mut out = [0u8; 3];
    for (o, &c) in out.iter_mut().zip(p.color.iter()) {
        let v = fog * c * lambert * tex + (1.0 - fog) * fog_color;
        *o = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    out
}

/// Number of (non-background) primitives each pixel ray hits.
pub fn coverage_counts(scene: &Scene) -> Array2<u32> {
    let cam = &scene.camera;
    Array2::from_shape_fn((cam.height, cam.width), |(r, c)| {
        let dir = cam.ray(r, c);
        scene
            .primitives
            .iter()
            .filter(|p| intersect(&p.shape, dir).is_some())
            .count() as u32
    })
}

pub fn render(scene: &Scene) -> Result<Rendering> {
    if scene.primitives.is_empty() {
        return Err(Error::Generation("scene has no primitives".into()));
    }
    let cam = &scene.camera;
    let (h, w) = (cam.height, cam.width);
    let mut depth = Array2::zeros((h, w));
    let mut normals = Array3::zeros((h, w, 3));
    let mut ids = Array2::zeros((h, w));
    let mut rgb = Array3::zeros((h, w, 3));
    let z_max = match scene.background.shape {
        Shape::Wall { z } => z,
        _ => scene.spec.depth_range[1],
    };
    for r in 0..h {
        for c in 0..w {
            let dir = cam.ray(r, c);
            let mut best: Option<(Hit, usize)> = intersect(&scene.background.shape, dir).map(|hit| (hit, 0));
            for (i, p) in scene.primitives.iter().enumerate() {
                if let Some(hit) = intersect(&p.shape, dir) {
                    if best.is_none_or(|(b, _)| hit.t < b.t) {
                        best = Some((hit, i + 1));
                    }
                }
            }
            let (hit, id) = best.ok_or_else(|| {
                Error::Generation(format!("pixel ({r}, {c}) hits no surface"))
            })?;
            depth[[r, c]] = hit.t;
            normals[[r, c, 0]] = hit.normal.x;
            normals[[r, c, 1]] = hit.normal.y;
            normals[[r, c, 2]] = hit.normal.z;
            ids[[r, c]] = id as u32;
            let prim = if id == 0 { &scene.background } else { &scene.primitives[id - 1] };
            let color = shade(prim, dir * hit.t, hit.normal, z_max);
            for k in 0..3 {
                rgb[[r, c, k]] = color[k];
            }
        }
    }
    Ok(Rendering { depth, normals, ids, rgb })
}

/// Renders `scene` and annotates occlusion boundaries with `rule`.
pub fn render_sample(scene: &Scene, rule: &BoundaryRule) -> Result<Sample> {
    let rendering = render(scene)?;
    let ob = derive_ob_from_depth(&rendering.depth, &rendering.normals, &scene.camera, rule)?;
    let sample = Sample {
        rgb: rendering.rgb,
        depth: rendering.depth.mapv(|d| d as f32),
        ob_mask: ob.mask,
        valid_mask: Array2::ones((scene.camera.height, scene.camera.width)),
    };
    Ok(sample)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::scene::{PrimitiveKind, SceneSpec};

    pub(crate) fn manual_scene(size: usize, primitives: Vec<Shape>, z_max: f64) -> Scene {
        let spec = SceneSpec {
            image_width: size,
            image_height: size,
            num_primitives: primitives.len().max(1),
            kinds: PrimitiveKind::ALL.to_vec(),
            depth_range: [0.5, z_max],
            texture: TextureMode::Flat,
            fov_deg: 60.0,
            contrast_threshold: 0.05,
            rng_seed: 0,
        };
        let prim = |shape| Primitive {
            kind: None,
            shape,
            color: [0.5, 0.6, 0.7],
            texture: TextureMode::Flat,
            texture_freq: 1.0,
            texture_seed: 0,
        };
        Scene {
            camera: Camera::from_fov(size, size, 60.0),
            background: prim(Shape::Wall { z: z_max }),
            primitives: primitives.into_iter().map(prim).collect(),
            spec,
        }
    }

    fn big_rect(z: f64) -> Shape {
        Shape::Rectangle {
            center: Vec3::new(0.0, 0.0, z),
            half_w: 10.0 * z,
            half_h: 10.0 * z,
        }
    }

    #[test]
    fn frame_filling_rectangle_is_constant_depth() {
        let scene = manual_scene(32, vec![big_rect(2.0)], 6.0);
        let r = render(&scene).unwrap();
        assert!(r.depth.iter().all(|&d| (d - 2.0).abs() < 1e-12));
    }

    #[test]
    fn stacked_rectangles_give_two_depths() {
        let front = Shape::Rectangle {
            center: Vec3::new(0.0, 0.0, 1.0),
            half_w: 0.2,
            half_h: 0.2,
        };
        let scene = manual_scene(32, vec![front, big_rect(3.0)], 6.0);
        let r = render(&scene).unwrap();
        let mut seen = [false; 2];
        for &d in r.depth.iter() {
            if (d - 1.0).abs() < 1e-12 {
                seen[0] = true;
            } else if (d - 3.0).abs() < 1e-12 {
                seen[1] = true;
            } else {
                panic!("unexpected depth {d}");
            }
        }
        assert_eq!(seen, [true, true]);
    }

    #[test]
    fn sphere_center_depth_is_distance_minus_radius() {
        let mut scene = manual_scene(
            32,
            vec![Shape::Sphere { center: Vec3::new(0.0, 0.0, 3.0), radius: 0.8 }],
            6.0,
        );
        // put the center of pixel (16, 16) exactly on the optical axis
        scene.camera.cx = 16.5;
        scene.camera.cy = 16.5;
        let r = render(&scene).unwrap();
        assert!((r.depth[[16, 16]] - 2.2).abs() < 1e-12, "{}", r.depth[[16, 16]]);
    }

    #[test]
    fn open_box_shows_its_interior() {
        let b = Shape::OpenBox {
            min: Vec3::new(-0.5, -0.5, 2.0),
            max: Vec3::new(0.5, 0.5, 2.6),
        };
        let scene = manual_scene(32, vec![b], 6.0);
        let r = render(&scene).unwrap();
        // the central ray passes through the open face onto the back panel
        assert!((r.depth[[16, 16]] - 2.6).abs() < 1e-12);
        assert!(r.ids.iter().any(|&i| i == 0));
    }

    #[test]
    fn empty_scene_is_a_generation_error() {
        let scene = manual_scene(32, vec![], 6.0);
        assert!(matches!(render(&scene), Err(Error::Generation(_))));
    }
}
