//! Solid (world-space) textures.

use super::geometry::Vec3;

fn lattice(ix: i64, iy: i64, iz: i64, seed: u64) -> f64 {
    let mut h = seed ^ 0x2545_F491_4F6C_DD1D;
    for v in [ix, iy, iz] {
        h ^= v as u64;
        h = h.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        h ^= h >> 29;
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Trilinearly interpolated value noise in `[0, 1)`.
pub fn value_noise(p: Vec3, seed: u64) -> f64 {
    let (fx, fy, fz) = (p.x.floor(), p.y.floor(), p.z.floor());
    let (ix, iy, iz) = (fx as i64, fy as i64, fz as i64);
    let (tx, ty, tz) = (smooth(p.x - fx), smooth(p.y - fy), smooth(p.z - fz));
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = if dx == 1 { tx } else { 1.0 - tx }
                    * if dy == 1 { ty } else { 1.0 - ty }
                    * if dz == 1 { tz } else { 1.0 - tz };
                acc += w * lattice(ix + dx, iy + dy, iz + dz, seed);
            }
        }
    }
    acc
}

/// Two octaves of value noise.
pub fn fractal_noise(p: Vec3, seed: u64) -> f64 {
    (2.0 * value_noise(p, seed) + value_noise(p * 2.0, seed.wrapping_add(1))) / 3.0
}
