//! Decoder components downstream of the encoder: pyramid pooling, the
//! cross-attention depth decoder block, the boundary decoder block and the
//! full-resolution image path.

use candle_core::{Module, Tensor};
use candle_nn::VarBuilder;

use super::attention::CrossWindowBlock;
use super::casm::ChannelAttention;
use crate::error::{config_err, shape_err, Error, Result};
use crate::layers::{adaptive_avg_pool, resize_bilinear, strict_sigmoid, upsample2x, ChannelNorm, Conv};

pub const PPM_GRIDS: [usize; 4] = [1, 2, 3, 6];

/// Pyramid pooling: average pools at grids 1, 2, 3, 6, each projected,
/// upsampled and concatenated with the input before a fusing convolution.
#[derive(Debug, Clone)]
pub struct Ppm {
    branches: Vec<Conv>,
    fuse: Conv,
    norm: ChannelNorm,
}

impl Ppm {
    pub fn new(vb: VarBuilder, c_in: usize, c_out: usize) -> Result<Self> {
        let c_branch = (c_in / 4).max(1);
        let branches = PPM_GRIDS
            .iter()
            .map(|g| Conv::pointwise(vb.pp(format!("pool{g}")), c_in, c_branch))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            branches,
            fuse: Conv::same(vb.pp("fuse"), c_in + PPM_GRIDS.len() * c_branch, c_out, (3, 3))?,
            norm: ChannelNorm::new(vb.pp("norm"), c_out)?,
        })
    }

    /// The raw pooled grids, before projection.
    pub fn pooled(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(PPM_GRIDS
            .iter()
            .map(|&g| adaptive_avg_pool(x, g, g))
            .collect::<candle_core::Result<Vec<_>>>()?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let mut parts = vec![x.clone()];
        for (pooled, proj) in self.pooled(x)?.iter().zip(&self.branches) {
            parts.push(resize_bilinear(&proj.forward(pooled)?.relu()?, h, w)?);
        }
        Ok(self.norm.forward(&self.fuse.forward(&Tensor::cat(&parts, 1)?)?)?.relu()?)
    }
}

/// One depth decoder step: project the incoming path to the level width and
/// let it attend to the encoder skip inside local windows.
#[derive(Debug, Clone)]
pub struct DepthBlock {
    proj_in: Conv,
    attn: CrossWindowBlock,
}

impl DepthBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        vb: VarBuilder,
        c_in: usize,
        c_skip: usize,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        window: usize,
        value_bias: bool,
    ) -> Result<Self> {
        Ok(Self {
            proj_in: Conv::pointwise(vb.pp("proj_in"), c_in, dim)?,
            attn: CrossWindowBlock::new(vb.pp("attn"), dim, c_skip, heads, mlp_ratio, window, value_bias)?,
        })
    }

    fn check(f_in: &Tensor, skip: &Tensor) -> Result<()> {
        let (_, _, h, w) = f_in.dims4()?;
        let (_, _, hs, ws) = skip.dims4()?;
        if (h, w) != (hs, ws) {
            return Err(shape_err!("decoder input {h}x{w} does not match skip {hs}x{ws}"));
        }
        Ok(())
    }

    pub fn attention_weights(&self, f_in: &Tensor, skip: &Tensor) -> Result<Tensor> {
        Self::check(f_in, skip)?;
        Ok(self.attn.attention_weights(&self.proj_in.forward(f_in)?, skip)?)
    }

    pub fn residual_path(&self, f_in: &Tensor) -> Result<Tensor> {
        Ok(self.attn.residual_path(&self.proj_in.forward(f_in)?)?)
    }

    pub fn forward(&self, f_in: &Tensor, skip: &Tensor) -> Result<Tensor> {
        Self::check(f_in, skip)?;
        Ok(self.attn.forward(&self.proj_in.forward(f_in)?, skip)?)
    }
}

/// Boundary decoder block: halve channels (1x1), two 3x3 convolutions,
/// 2x upsampling; plus a 1-channel side logit at the block output.
#[derive(Debug, Clone)]
pub struct ObBlock {
    halve: Conv,
    conv1: Conv,
    conv2: Conv,
    side: Conv,
}

impl ObBlock {
    pub fn new(vb: VarBuilder, c_in: usize) -> Result<Self> {
        if !c_in.is_multiple_of(2) {
            return Err(config_err!("boundary decoder block needs an even channel count, got {c_in}"));
        }
        let c = c_in / 2;
        Ok(Self {
            halve: Conv::pointwise(vb.pp("halve"), c_in, c)?,
            conv1: Conv::same(vb.pp("conv1"), c, c, (3, 3))?,
            conv2: Conv::same(vb.pp("conv2"), c, c, (3, 3))?,
            side: Conv::pointwise(vb.pp("side"), c, 1)?,
        })
    }

    /// Returns `(next features, side logit at (out_h, out_w))`.
    pub fn forward(&self, x: &Tensor, out_h: usize, out_w: usize) -> Result<(Tensor, Tensor)> {
        let y = self.halve.forward(x)?.relu()?;
        let y = self.conv1.forward(&y)?.relu()?;
        let y = self.conv2.forward(&y)?.relu()?;
        let next = upsample2x(&y)?;
        let side = resize_bilinear(&self.side.forward(&next)?, out_h, out_w)?;
        Ok((next, side))
    }
}

/// Full-resolution image path for boundary refinement: a conv stem whose
/// features are modulated by a spatial and a channel attention branch, fused
/// and merged with the last boundary decoder features.
#[derive(Debug, Clone)]
pub struct Eip {
    stem1: Conv,
    stem2: Conv,
    spatial: Conv,
    channel: ChannelAttention,
    fuse: Conv,
    merge: Conv,
    out: Conv,
}

impl Eip {
    pub fn new(vb: VarBuilder, width: usize, c_skip: usize, reduction: usize) -> Result<Self> {
        Ok(Self {
            stem1: Conv::same(vb.pp("stem1"), 3, width, (3, 3))?,
            stem2: Conv::same(vb.pp("stem2"), width, width, (3, 3))?,
            spatial: Conv::same(vb.pp("spatial"), 2, 1, (7, 7))?,
            channel: ChannelAttention::new(vb.pp("channel"), width, reduction)?,
            fuse: Conv::pointwise(vb.pp("fuse"), 2 * width, width)?,
            merge: Conv::same(vb.pp("merge"), width + c_skip, width, (3, 3))?,
            out: Conv::pointwise(vb.pp("out"), width, 1)?,
        })
    }

    fn stem(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.stem2.forward(&self.stem1.forward(image)?.relu()?)?.relu()?)
    }

    fn spatial_map_of(&self, s: &Tensor) -> Result<Tensor> {
        let stats = Tensor::cat(&[s.mean_keepdim(1)?, s.max_keepdim(1)?], 1)?;
        Ok(strict_sigmoid(&self.spatial.forward(&stats)?)?)
    }

    /// Spatial attention map `(B, 1, H, W)` in (0, 1).
    pub fn spatial_map(&self, image: &Tensor) -> Result<Tensor> {
        self.spatial_map_of(&self.stem(image)?)
    }

    pub fn stem_parameters(&self) -> [&Tensor; 2] {
        [self.stem1.weight(), self.stem2.weight()]
    }

    pub fn forward(&self, image: &Tensor, skip: Option<&Tensor>) -> Result<Tensor> {
        let skip = skip.ok_or_else(|| {
            Error::Config("image path needs the last boundary decoder features as skip".into())
        })?;
        let s = self.stem(image)?;
        let (_, _, h, w) = s.dims4()?;
        let (_, _, hs, ws) = skip.dims4()?;
        if (h, w) != (hs, ws) {
            return Err(shape_err!("image path at {h}x{w}, skip at {hs}x{ws}"));
        }
        let spatial = s.broadcast_mul(&self.spatial_map_of(&s)?)?;
        let channel = s.broadcast_mul(&self.channel.forward(&s)?)?;
        let fused = self.fuse.forward(&Tensor::cat(&[spatial, channel], 1)?)?.relu()?;
        let merged = self.merge.forward(&Tensor::cat(&[&fused, skip], 1)?)?.relu()?;
        Ok(self.out.forward(&merged)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    fn vb(store: &ParamStore) -> VarBuilder<'static> {
        store.var_builder(DType::F32, &Device::Cpu)
    }

    #[test]
    fn ppm_grids_and_shape() {
        let store = ParamStore::new(2);
        let ppm = Ppm::new(vb(&store), 8, 12).unwrap();
        let x = Tensor::randn(0f32, 1.0, (1, 8, 12, 12), &Device::Cpu).unwrap();
        let grids: Vec<_> = ppm.pooled(&x).unwrap().iter().map(|t| t.dims()[2..].to_vec()).collect();
        assert_eq!(grids, vec![vec![1, 1], vec![2, 2], vec![3, 3], vec![6, 6]]);
        assert_eq!(ppm.forward(&x).unwrap().dims(), &[1, 12, 12, 12]);
        let c = Tensor::full(2.5f32, (1, 8, 12, 12), &Device::Cpu).unwrap();
        for p in ppm.pooled(&c).unwrap() {
            let v = p.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(v.iter().all(|&x| (x - 2.5).abs() < 1e-5));
        }
    }

    #[test]
    fn ob_block_halves_and_doubles() {
        let store = ParamStore::new(3);
        let b = ObBlock::new(vb(&store), 64).unwrap();
        let x = Tensor::randn(0f32, 1.0, (1, 64, 16, 16), &Device::Cpu).unwrap();
        let (next, side) = b.forward(&x, 64, 64).unwrap();
        assert_eq!(next.dims(), &[1, 32, 32, 32]);
        assert_eq!(side.dims(), &[1, 1, 64, 64]);
        assert!(matches!(ObBlock::new(vb(&store).pp("odd"), 7), Err(Error::Config(_))));
    }

    #[test]
    fn eip_requires_skip() {
        let store = ParamStore::new(4);
        let eip = Eip::new(vb(&store), 8, 6, 4).unwrap();
        let img = Tensor::randn(0f32, 1.0, (1, 3, 16, 16), &Device::Cpu).unwrap();
        assert!(matches!(eip.forward(&img, None), Err(Error::Config(_))));
        let skip = Tensor::randn(0f32, 1.0, (1, 6, 16, 16), &Device::Cpu).unwrap();
        assert_eq!(eip.forward(&img, Some(&skip)).unwrap().dims(), &[1, 1, 16, 16]);
        let sa = eip.spatial_map(&img).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(sa.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
