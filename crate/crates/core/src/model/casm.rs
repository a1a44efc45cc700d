//! Cross-attention strip module: depth and boundary streams re-weight each
//! other's channels, and a bank of strip convolutions fuses them.

use candle_core::{Module, Tensor};
use candle_nn::VarBuilder;

use crate::config::CasmConfig;
use crate::error::{config_err, shape_err, Result};
use crate::layers::{strict_sigmoid, upsample2x, Conv};

/// Squeeze-excitation channel attention returning a `(B, C, 1, 1)` weight in
/// (0, 1).
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    reduce: Conv,
    expand: Conv,
}

impl ChannelAttention {
    pub fn new(vb: VarBuilder, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(config_err!("{channels} channels not divisible by reduction {reduction}"));
        }
        let hidden = channels / reduction;
        Ok(Self {
            reduce: Conv::pointwise(vb.pp("reduce"), channels, hidden)?,
            expand: Conv::pointwise(vb.pp("expand"), hidden, channels)?,
        })
    }

    pub fn reduce(&self) -> &Conv {
        &self.reduce
    }

    pub fn expand(&self) -> &Conv {
        &self.expand
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let pooled = x.mean_keepdim(3)?.mean_keepdim(2)?;
        let z = self.reduce.forward(&pooled)?.relu()?;
        Ok(strict_sigmoid(&self.expand.forward(&z)?)?)
    }
}

/// Kernel shapes of the strip branches, horizontal/vertical pairs first.
pub const STRIP_KERNELS: [(usize, usize); 4] = [(1, 7), (7, 1), (1, 11), (11, 1)];

/// Parallel `1x7, 7x1, 1x11, 11x1` and `3x3` convolutions over the
/// concatenated streams, fused by a 1x1 convolution.
#[derive(Debug, Clone)]
pub struct MssFuse {
    branches: Vec<Conv>,
    fuse: Conv,
}

impl MssFuse {
    pub fn new(vb: VarBuilder, channels: usize, square_branches: usize) -> Result<Self> {
        let mut kernels = STRIP_KERNELS.to_vec();
        kernels.extend(std::iter::repeat_n((3, 3), square_branches));
        let branches = kernels
            .iter()
            .enumerate()
            .map(|(i, &k)| Conv::same(vb.pp(format!("branch{i}")), 2 * channels, channels, k))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let fuse = Conv::pointwise(vb.pp("fuse"), branches.len() * channels, channels)?;
        Ok(Self { branches, fuse })
    }

    pub fn from_parts(branches: Vec<Conv>, fuse: Conv) -> Self {
        Self { branches, fuse }
    }

    pub fn branches(&self) -> &[Conv] {
        &self.branches
    }

    /// Copy with every `1xk` branch weight swapped with (the transpose of)
    /// its `kx1` partner and square kernels transposed.
    pub fn transposed(&self) -> Result<Self> {
        let t = |c: &Conv| -> Result<Conv> {
            Ok(Conv::from_tensors(c.weight().transpose(2, 3)?.contiguous()?, c.bias().cloned())?)
        };
        let mut branches = Vec::with_capacity(self.branches.len());
        for i in 0..self.branches.len() {
            let partner = if i < STRIP_KERNELS.len() { i ^ 1 } else { i };
            branches.push(t(&self.branches[partner])?);
        }
        Ok(Self {
            branches,
            fuse: self.fuse.clone(),
        })
    }

    /// Pre-fusion branch outputs.
    pub fn branch_outputs(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let c = x.dim(1)?;
        let expect = self.branches.first().map(|b| b.weight().dim(1)).transpose()?.unwrap_or(c);
        if c != expect {
            return Err(shape_err!("strip fuse expects {expect} input channels, got {c}"));
        }
        Ok(self
            .branches
            .iter()
            .map(|b| b.forward(x))
            .collect::<candle_core::Result<Vec<_>>>()?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let outs = self.branch_outputs(x)?;
        Ok(self.fuse.forward(&Tensor::cat(&outs, 1)?)?)
    }
}

/// Intermediate tensors of one module application.
#[derive(Debug, Clone)]
pub struct CasmTrace {
    pub f_d: Tensor,
    pub f_ob: Tensor,
    pub w_d: Tensor,
    pub w_ob: Tensor,
    pub mssf: Tensor,
}

/// Merge rule: `(mssf + f_d * w_ob, f_ob * w_d)`.
pub fn combine(f_d: &Tensor, f_ob: &Tensor, w_d: &Tensor, w_ob: &Tensor, mssf: &Tensor) -> Result<(Tensor, Tensor)> {
    let d_ob = f_d.broadcast_mul(w_ob)?;
    let ob_d = f_ob.broadcast_mul(w_d)?;
    Ok(((mssf + d_ob)?, ob_d))
}

#[derive(Debug, Clone)]
pub struct Casm {
    proj_d: Conv,
    proj_ob: Conv,
    att_d: ChannelAttention,
    att_ob: ChannelAttention,
    mss: MssFuse,
    channels: usize,
}

impl Casm {
    pub fn new(vb: VarBuilder, c_d: usize, c_ob: usize, channels: usize, cfg: &CasmConfig) -> Result<Self> {
        Ok(Self {
            proj_d: Conv::pointwise(vb.pp("proj_d"), c_d, channels)?,
            proj_ob: Conv::pointwise(vb.pp("proj_ob"), c_ob, channels)?,
            att_d: ChannelAttention::new(vb.pp("att_d"), channels, cfg.reduction)?,
            att_ob: ChannelAttention::new(vb.pp("att_ob"), channels, cfg.reduction)?,
            mss: MssFuse::new(vb.pp("mss"), channels, cfg.square_branches)?,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn mss(&self) -> &MssFuse {
        &self.mss
    }

    /// Upsampled, projected inputs `(F'_D, F'_OB)`. The 1x1 projection is
    /// applied before the bilinear upsampling, which is equivalent and
    /// cheaper since interpolation weights sum to one.
    pub fn project(&self, f_d: &Tensor, f_ob: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, _, h, w) = f_d.dims4()?;
        let (_, _, h2, w2) = f_ob.dims4()?;
        if (h, w) != (h2, w2) {
            return Err(shape_err!("CASM inputs differ in size: {h}x{w} vs {h2}x{w2}"));
        }
        Ok((
            upsample2x(&self.proj_d.forward(f_d)?)?,
            upsample2x(&self.proj_ob.forward(f_ob)?)?,
        ))
    }

    pub fn trace(&self, f_d: &Tensor, f_ob: &Tensor) -> Result<CasmTrace> {
        let (f_d, f_ob) = self.project(f_d, f_ob)?;
        let w_d = self.att_d.forward(&f_d)?;
        let w_ob = self.att_ob.forward(&f_ob)?;
        let mssf = self.mss.forward(&Tensor::cat(&[&f_d, &f_ob], 1)?)?;
        Ok(CasmTrace {
            f_d,
            f_ob,
            w_d,
            w_ob,
            mssf,
        })
    }

    /// Returns `(enhanced depth features, depth-aware boundary features)`,
    /// both at twice the input size with `channels` channels.
    pub fn forward(&self, f_d: &Tensor, f_ob: &Tensor) -> Result<(Tensor, Tensor)> {
        let t = self.trace(f_d, f_ob)?;
        combine(&t.f_d, &t.f_ob, &t.w_d, &t.w_ob, &t.mssf)
    }
}

/// Ablation stand-in: independent upsample + projection of each stream.
#[derive(Debug, Clone)]
pub struct PlainFusion {
    proj_d: Conv,
    proj_ob: Conv,
}

impl PlainFusion {
    pub fn new(vb: VarBuilder, c_d: usize, c_ob: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            proj_d: Conv::pointwise(vb.pp("proj_d"), c_d, channels)?,
            proj_ob: Conv::pointwise(vb.pp("proj_ob"), c_ob, channels)?,
        })
    }

    pub fn forward(&self, f_d: &Tensor, f_ob: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((
            upsample2x(&self.proj_d.forward(f_d)?)?,
            upsample2x(&self.proj_ob.forward(f_ob)?)?,
        ))
    }
}

#[derive(Debug, Clone)]
pub enum Fusion {
    Casm(Casm),
    Plain(PlainFusion),
}

impl Fusion {
    pub fn new(vb: VarBuilder, use_casm: bool, c_d: usize, c_ob: usize, channels: usize, cfg: &CasmConfig) -> Result<Self> {
        Ok(if use_casm {
            Fusion::Casm(Casm::new(vb, c_d, c_ob, channels, cfg)?)
        } else {
            Fusion::Plain(PlainFusion::new(vb, c_d, c_ob, channels)?)
        })
    }

    pub fn forward(&self, f_d: &Tensor, f_ob: &Tensor) -> Result<(Tensor, Tensor)> {
        match self {
            Fusion::Casm(c) => c.forward(f_d, f_ob),
            Fusion::Plain(p) => p.forward(f_d, f_ob),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    fn casm(dtype: DType) -> Casm {
        let store = ParamStore::new(9);
        Casm::new(store.var_builder(dtype, &Device::Cpu), 12, 20, 16, &CasmConfig::default()).unwrap()
    }

    #[test]
    fn doubles_size_and_projects() {
        let m = casm(DType::F32);
        let d = Tensor::randn(0f32, 1.0, (2, 12, 8, 8), &Device::Cpu).unwrap();
        let ob = Tensor::randn(0f32, 1.0, (2, 20, 8, 8), &Device::Cpu).unwrap();
        let (a, b) = m.forward(&d, &ob).unwrap();
        assert_eq!(a.dims(), &[2, 16, 16, 16]);
        assert_eq!(b.dims(), &[2, 16, 16, 16]);
        let bad = Tensor::zeros((2, 20, 4, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(m.forward(&d, &bad), Err(crate::error::Error::Shape(_))));
    }

    #[test]
    fn reduction_must_divide() {
        let store = ParamStore::new(0);
        let vb = store.var_builder(DType::F32, &Device::Cpu);
        assert!(matches!(ChannelAttention::new(vb, 10, 4), Err(crate::error::Error::Config(_))));
    }

    #[test]
    fn identity_composition() {
        let f = Tensor::randn(0f64, 1.0, (1, 4, 3, 3), &Device::Cpu).unwrap();
        let g = Tensor::randn(0f64, 1.0, (1, 4, 3, 3), &Device::Cpu).unwrap();
        let w_d = Tensor::full(0.3f64, (1, 4, 1, 1), &Device::Cpu).unwrap();
        let ones = Tensor::ones((1, 4, 1, 1), DType::F64, &Device::Cpu).unwrap();
        let zero = f.zeros_like().unwrap();
        let (d, _) = combine(&f, &g, &w_d, &ones, &zero).unwrap();
        let diff = (d - &f).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(diff, 0.0);
    }
}
