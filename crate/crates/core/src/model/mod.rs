//! Two-stage joint depth and occlusion-boundary network.
//!
//! Stage one: a shared encoder feeds a depth decoder (pyramid pooling plus
//! four cross-attention blocks) and a five-block boundary decoder; at every
//! pyramid level a cross-attention strip module exchanges information
//! between the two streams. A full-resolution image path refines the final
//! boundary map. Stage two refines both outputs at full resolution with one
//! more strip module while stage one stays frozen.

pub mod attention;
pub mod casm;
pub mod encoder;
pub mod heads;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::VarBuilder;
use ndarray::Array3;

pub use casm::{combine, Casm, CasmTrace, ChannelAttention, Fusion, MssFuse};
pub use encoder::{level_widths, Encoder, FeaturePyramid};
pub use heads::{DepthBlock, Eip, ObBlock, Ppm, PPM_GRIDS};

use crate::config::ModelConfig;
use crate::error::{config_err, shape_err, Result};
use crate::layers::{resize_bilinear, strict_sigmoid, Conv};

/// Parameter-name prefix of the stage-one network.
pub const STAGE1_PREFIX: &str = "stage1.";
/// Parameter-name prefix of the refinement stage.
pub const SSR_PREFIX: &str = "ssr.";

const MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Stacks `H x W x 3` images into a normalized `(B, 3, H, W)` tensor.
pub fn image_tensor(images: &[&Array3<u8>], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| config_err!("empty image batch"))?;
    let (h, w, c) = first.dim();
    if c != 3 {
        return Err(shape_err!("expected 3-channel images, got {c}"));
    }
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.dim() != (h, w, 3) {
            return Err(shape_err!("image batch mixes sizes {:?} and {:?}", (h, w, 3), img.dim()));
        }
        for k in 0..3 {
            for r in 0..h {
                for col in 0..w {
                    data.push(((img[[r, col, k]] as f64 / 255.0) - MEAN[k]) / STD[k]);
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

/// Channel count of the fused streams after the strip module at level `i`.
pub fn fused_widths(base: usize) -> [usize; 4] {
    level_widths(base).map(|w| (w / 2).max(base))
}

#[derive(Debug, Clone)]
pub struct Stage1Output {
    /// `(B, 1, H, W)` meters.
    pub depth: Tensor,
    /// Pre-sigmoid depth at full resolution; `depth = max_depth * sigmoid`.
    pub depth_logit: Tensor,
    pub ob_logit: Tensor,
    /// Five side logits at full resolution, coarsest first.
    pub ob_side_logits: Vec<Tensor>,
    /// Depth features of the last strip module, half resolution.
    pub f_depth_last: Tensor,
    /// Output of the last boundary decoder block, full resolution.
    pub f_ob_last: Tensor,
}

impl Stage1Output {
    pub fn ob_prob(&self) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.ob_logit)?)
    }

    pub fn ob_side_probs(&self) -> Result<Vec<Tensor>> {
        Ok(self
            .ob_side_logits
            .iter()
            .map(candle_nn::ops::sigmoid)
            .collect::<candle_core::Result<_>>()?)
    }

    /// Final map followed by the side outputs, as supervised in training.
    pub fn ob_logits_all(&self) -> Vec<Tensor> {
        let mut v = vec![self.ob_logit.clone()];
        v.extend(self.ob_side_logits.iter().cloned());
        v
    }
}

#[derive(Debug, Clone)]
pub struct Stage2Output {
    pub depth: Tensor,
    pub depth_logit: Tensor,
    pub ob_logit: Tensor,
}

impl Stage2Output {
    pub fn ob_prob(&self) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.ob_logit)?)
    }
}

/// Full-resolution refinement of stage-one features.
#[derive(Debug, Clone)]
pub struct Ssr {
    stem1: Conv,
    stem2: Conv,
    fusion: Fusion,
    depth_hidden: Conv,
    depth_out: Conv,
    ob_hidden: Conv,
    ob_out: Conv,
}

impl Ssr {
    fn new(vb: VarBuilder, cfg: &ModelConfig, c_depth: usize, c_ob: usize) -> Result<Self> {
        let c = cfg.encoder.base_channels;
        Ok(Self {
            stem1: Conv::same(vb.pp("stem1"), 3, c, (3, 3))?,
            stem2: Conv::same(vb.pp("stem2"), c, c, (3, 3))?,
            fusion: Fusion::new(vb.pp("casm"), cfg.use_casm, c_depth, c_ob, c, &cfg.casm)?,
            depth_hidden: Conv::same(vb.pp("depth_hidden"), 3 * c, c, (3, 3))?,
            depth_out: Conv::same_zero(vb.pp("depth_out"), c, 1, (1, 1))?,
            ob_hidden: Conv::same(vb.pp("ob_hidden"), 3 * c, c, (3, 3))?,
            ob_out: Conv::same_zero(vb.pp("ob_out"), c, 1, (1, 1))?,
        })
    }

    /// Residual corrections `(depth logit, boundary logit)` at full resolution.
    fn forward(&self, image: &Tensor, f_depth: &Tensor, f_ob: &Tensor) -> Result<(Tensor, Tensor)> {
        let stem = self.stem2.forward(&self.stem1.forward(image)?.relu()?)?.relu()?;
        let f_ob = f_ob.avg_pool2d(2)?;
        let (d, ob) = self.fusion.forward(f_depth, &f_ob)?;
        let feats = Tensor::cat(&[&d, &ob, &stem], 1)?;
        let rd = self.depth_out.forward(&self.depth_hidden.forward(&feats)?.relu()?)?;
        let rob = self.ob_out.forward(&self.ob_hidden.forward(&feats)?.relu()?)?;
        Ok((rd, rob))
    }
}

#[derive(Debug, Clone)]
pub struct Modot {
    cfg: ModelConfig,
    encoder: Encoder,
    ppm: Ppm,
    /// Indexed by pyramid level.
    depth_blocks: Vec<DepthBlock>,
    fusions: Vec<Fusion>,
    ob_blocks: Vec<ObBlock>,
    eip: Option<Eip>,
    ob_head: Option<Conv>,
    depth_head: Conv,
    ssr: Option<Ssr>,
}

impl Modot {
    /// `vb` is the root builder; parameters land under `stage1.` and `ssr.`.
    pub fn new(vb: VarBuilder, cfg: &ModelConfig) -> Result<Self> {
        if !(cfg.max_depth > 0.0) {
            return Err(config_err!("max_depth must be positive"));
        }
        let enc = &cfg.encoder;
        let c = enc.base_channels;
        let s1 = vb.pp("stage1");
        let encoder = Encoder::new(s1.pp("encoder"), enc)?;
        let widths = level_widths(c);
        let fused = fused_widths(c);
        let ppm = Ppm::new(s1.pp("ppm"), widths[3], widths[3])?;
        let mut depth_blocks = Vec::new();
        let mut fusions = Vec::new();
        for i in 0..4 {
            let c_in = if i == 3 { widths[3] } else { fused[i + 1] };
            depth_blocks.push(DepthBlock::new(
                s1.pp(format!("depth{i}")),
                c_in,
                widths[i],
                widths[i],
                enc.heads[i],
                enc.mlp_ratio,
                enc.window_size,
                true,
            )?);
            fusions.push(Fusion::new(
                s1.pp(format!("casm{i}")),
                cfg.use_casm,
                widths[i],
                widths[i],
                fused[i],
                &cfg.casm,
            )?);
        }
        let mut ob_blocks = Vec::new();
        let mut c_in = widths[3];
        for k in 0..5 {
            if k > 0 {
                c_in += fused[4 - k];
            }
            ob_blocks.push(ObBlock::new(s1.pp(format!("ob{k}")), c_in)?);
            c_in /= 2;
        }
        let c_ob_last = c_in;
        let (eip, ob_head) = if cfg.use_eip {
            (Some(Eip::new(s1.pp("eip"), c, c_ob_last, cfg.casm.reduction)?), None)
        } else {
            (None, Some(Conv::pointwise(s1.pp("ob_head"), c_ob_last, 1)?))
        };
        let depth_head = Conv::pointwise(s1.pp("depth_head"), fused[0], 1)?;
        let ssr = if cfg.use_ssr {
            Some(Ssr::new(vb.pp("ssr"), cfg, fused[0], c_ob_last)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            ppm,
            depth_blocks,
            fusions,
            ob_blocks,
            eip,
            ob_head,
            depth_head,
            ssr,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn ppm(&self) -> &Ppm {
        &self.ppm
    }

    pub fn eip(&self) -> Option<&Eip> {
        self.eip.as_ref()
    }

    pub fn has_ssr(&self) -> bool {
        self.ssr.is_some()
    }

    fn depth_from_logit(&self, logit: &Tensor) -> Result<Tensor> {
        Ok((strict_sigmoid(logit)? * self.cfg.max_depth)?)
    }

    pub fn stage1_forward(&self, image: &Tensor) -> Result<Stage1Output> {
        let (_, _, h, w) = image.dims4()?;
        let pyramid = self.encoder.encode(image)?;
        let levels = &pyramid.levels;

        let mut f = self.ppm.forward(&levels[3])?;
        let mut fused_ob = [None, None, None, None];
        for i in (0..4).rev() {
            let f_d = self.depth_blocks[i].forward(&f, &levels[i])?;
            let (d, ob) = self.fusions[i].forward(&f_d, &levels[i])?;
            fused_ob[i] = Some(ob);
            f = d;
        }
        let f_depth_last = f;

        let mut x = levels[3].clone();
        let mut sides = Vec::with_capacity(5);
        for (k, block) in self.ob_blocks.iter().enumerate() {
            if k > 0 {
                let skip = fused_ob[4 - k].as_ref().expect("filled above");
                x = Tensor::cat(&[&x, skip], 1)?;
            }
            let (next, side) = block.forward(&x, h, w)?;
            sides.push(side);
            x = next;
        }
        let f_ob_last = x;

        let ob_logit = match (&self.eip, &self.ob_head) {
            (Some(eip), _) => eip.forward(image, Some(&f_ob_last))?,
            (None, Some(head)) => head.forward(&f_ob_last)?,
            (None, None) => unreachable!("one boundary head is always built"),
        };
        let depth_logit = resize_bilinear(&self.depth_head.forward(&f_depth_last)?, h, w)?;
        Ok(Stage1Output {
            depth: self.depth_from_logit(&depth_logit)?,
            depth_logit,
            ob_logit,
            ob_side_logits: sides,
            f_depth_last,
            f_ob_last,
        })
    }

    /// Refines stage-one outputs. Stage-one tensors are detached, so no
    /// gradient reaches stage-one parameters.
    pub fn ssr_forward(&self, image: &Tensor, s1: &Stage1Output) -> Result<Stage2Output> {
        let ssr = self
            .ssr
            .as_ref()
            .ok_or_else(|| config_err!("refinement stage is disabled (model.use_ssr = false)"))?;
        let (rd, rob) = ssr.forward(image, &s1.f_depth_last.detach(), &s1.f_ob_last.detach())?;
        let depth_logit = (s1.depth_logit.detach() + rd)?;
        let ob_logit = (s1.ob_logit.detach() + rob)?;
        Ok(Stage2Output {
            depth: self.depth_from_logit(&depth_logit)?,
            depth_logit,
            ob_logit,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EncoderKind;
    use crate::params::ParamStore;

    fn model(cfg: &ModelConfig) -> (ParamStore, Modot) {
        let store = ParamStore::new(5);
        let m = Modot::new(store.var_builder(DType::F32, &Device::Cpu), cfg).unwrap();
        (store, m)
    }

    #[test]
    fn stage_shapes_on_64() {
        let mut cfg = ModelConfig::default();
        cfg.encoder.kind = EncoderKind::Conv;
        let (store, m) = model(&cfg);
        let img = Tensor::randn(0f32, 1.0, (2, 3, 64, 64), &Device::Cpu).unwrap();
        let s1 = m.stage1_forward(&img).unwrap();
        assert_eq!(s1.depth.dims(), &[2, 1, 64, 64]);
        assert_eq!(s1.ob_logit.dims(), &[2, 1, 64, 64]);
        assert_eq!(s1.ob_side_logits.len(), 5);
        assert_eq!(s1.f_depth_last.dims(), &[2, 16, 32, 32]);
        assert_eq!(s1.f_ob_last.dims(), &[2, 24, 64, 64]);
        let s2 = m.ssr_forward(&img, &s1).unwrap();
        assert_eq!(s2.depth.dims(), &[2, 1, 64, 64]);
        assert!(store.num_elements(SSR_PREFIX) > 0);
        assert_eq!(
            store.num_elements(""),
            store.num_elements(STAGE1_PREFIX) + store.num_elements(SSR_PREFIX)
        );
    }

    #[test]
    fn ablation_flags_build() {
        for (casm, eip, ssr) in [(false, false, false), (false, true, true), (true, false, true)] {
            let cfg = ModelConfig {
                use_casm: casm,
                use_eip: eip,
                use_ssr: ssr,
                ..ModelConfig::default()
            };
            let (_, m) = model(&cfg);
            let img = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
            let s1 = m.stage1_forward(&img).unwrap();
            assert_eq!(s1.ob_logit.dims(), &[1, 1, 64, 64]);
            assert_eq!(m.ssr_forward(&img, &s1).is_ok(), ssr);
        }
    }
}
