//! In-memory splits, seeded per-step batch sampling and tensor packing.

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{read_sample, DatasetManifest, Sample, Split};
use crate::error::{config_err, Result};
use crate::model::image_tensor;

/// Samples of one split, loaded eagerly, in manifest order.
#[derive(Debug, Clone)]
pub struct LoadedSplit {
    pub ids: Vec<String>,
    pub samples: Vec<Sample>,
}

impl LoadedSplit {
    pub fn load(manifest: &DatasetManifest, split: Split) -> Result<Self> {
        let entries = manifest.split(split);
        let mut ids = Vec::with_capacity(entries.len());
        let mut samples = Vec::with_capacity(entries.len());
        for e in entries {
            let s = read_sample(&manifest.paths(e))?;
            s.validate()?;
            ids.push(e.sample_id.clone());
            samples.push(s);
        }
        Ok(Self { ids, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Tensors of one batch; maps are `(B, 1, H, W)` f32.
#[derive(Debug, Clone)]
pub struct Batch {
    pub image: Tensor,
    pub depth: Tensor,
    pub ob: Tensor,
    pub valid: Tensor,
}

fn map_tensor<T: Copy>(maps: &[&Array2<T>], f: impl Fn(T) -> f32, device: &Device) -> Result<Tensor> {
    let (h, w) = maps[0].dim();
    let data: Vec<f32> = maps.iter().flat_map(|m| m.iter().map(|&v| f(v))).collect();
    Ok(Tensor::from_vec(data, (maps.len(), 1, h, w), device)?)
}

impl Batch {
    pub fn from_samples(samples: &[Sample], device: &Device) -> Result<Self> {
        if samples.is_empty() {
            return Err(config_err!("empty batch"));
        }
        let images: Vec<_> = samples.iter().map(|s| &s.rgb).collect();
        let depths: Vec<_> = samples.iter().map(|s| &s.depth).collect();
        let obs: Vec<_> = samples.iter().map(|s| &s.ob_mask).collect();
        let valids: Vec<_> = samples.iter().map(|s| &s.valid_mask).collect();
        Ok(Self {
            image: image_tensor(&images, DType::F32, device)?,
            depth: map_tensor(&depths, |v| v, device)?,
            ob: map_tensor(&obs, |v| v as f32, device)?,
            valid: map_tensor(&valids, |v| v as f32, device)?,
        })
    }
}

/// RNG of one optimizer step, a pure function of `(seed, stage, step)` so a
/// resumed run draws the same batches as an uninterrupted one.
pub fn step_rng(seed: u64, stage: u8, step: usize) -> ChaCha8Rng {
    let key = seed
        ^ ((stage as u64) << 56)
        ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    ChaCha8Rng::seed_from_u64(key)
}

#[derive(Debug, Clone, Copy)]
pub struct Augment {
    /// Square crop side; `None` keeps full images.
    pub crop: Option<usize>,
    pub hflip: bool,
    pub color_jitter: bool,
}

fn jitter(sample: &mut Sample, rng: &mut ChaCha8Rng) {
    let gain: f64 = rng.random_range(0.8..1.2);
    let bias: f64 = rng.random_range(-0.05..0.05) * 255.0;
    sample
        .rgb
        .mapv_inplace(|v| (v as f64 * gain + bias).round().clamp(0.0, 255.0) as u8);
}

/// Draws `batch_size` samples with replacement and applies crop, flip and
/// jitter jointly to image, depth and boundary maps.
pub fn sample_batch(pool: &[Sample], batch_size: usize, aug: Augment, rng: &mut ChaCha8Rng) -> Result<Vec<Sample>> {
    if pool.is_empty() {
        return Err(config_err!("no training samples"));
    }
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let src = &pool[rng.random_range(0..pool.len())];
        let mut s = match aug.crop {
            Some(c) => {
                let (h, w) = (src.height(), src.width());
                if c > h || c > w {
                    return Err(config_err!("crop {c} exceeds image size {h}x{w}"));
                }
                let top = rng.random_range(0..=h - c);
                let left = rng.random_range(0..=w - c);
                src.crop(top, left, c, c)
            }
            None => src.clone(),
        };
        if aug.hflip && rng.random::<bool>() {
            s = s.flipped();
        }
        if aug.color_jitter {
            jitter(&mut s, rng);
        }
        out.push(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn sample(v: u8) -> Sample {
        let mut depth = Array2::from_elem((8, 8), 2.0f32);
        depth[[0, 0]] = 1.0;
        Sample {
            rgb: Array3::from_elem((8, 8, 3), v),
            depth,
            ob_mask: Array2::zeros((8, 8)),
            valid_mask: Array2::ones((8, 8)),
        }
    }

    #[test]
    fn batches_are_reproducible_per_step() {
        let pool = vec![sample(1), sample(2), sample(3)];
        let aug = Augment {
            crop: Some(4),
            hflip: true,
            color_jitter: true,
        };
        let a = sample_batch(&pool, 4, aug, &mut step_rng(7, 1, 3)).unwrap();
        let b = sample_batch(&pool, 4, aug, &mut step_rng(7, 1, 3)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.depth.dim() == (4, 4)));
        let c = sample_batch(&pool, 4, aug, &mut step_rng(7, 1, 4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn packs_shapes() {
        let b = Batch::from_samples(&[sample(1), sample(2)], &Device::Cpu).unwrap();
        assert_eq!(b.image.dims(), &[2, 3, 8, 8]);
        assert_eq!(b.depth.dims(), &[2, 1, 8, 8]);
        assert_eq!(b.valid.dims(), &[2, 1, 8, 8]);
    }

    #[test]
    fn oversized_crop_is_config_error() {
        let aug = Augment {
            crop: Some(16),
            hflip: false,
            color_jitter: false,
        };
        let err = sample_batch(&[sample(0)], 1, aug, &mut step_rng(0, 1, 0)).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)));
    }
}
