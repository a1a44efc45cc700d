//! Shared four-level image encoder (strides 4, 8, 16, 32).

use candle_core::{Module, Tensor};
use candle_nn::VarBuilder;

use super::attention::WindowBlock;
use crate::config::{EncoderConfig, EncoderKind};
use crate::error::{config_err, shape_err, Result};
use crate::layers::{ChannelNorm, Conv};

/// Four levels at strides 4, 8, 16, 32 with widths `C, 2C, 4C, 8C`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 4],
}

/// Widths of the four pyramid levels.
pub fn level_widths(base: usize) -> [usize; 4] {
    [base, 2 * base, 4 * base, 8 * base]
}

#[derive(Debug, Clone)]
enum Stage {
    Transformer(Vec<WindowBlock>),
    Conv(Vec<(ChannelNorm, Conv, Conv)>),
}

#[derive(Debug, Clone)]
pub struct Encoder {
    downs: Vec<(Conv, ChannelNorm)>,
    stages: Vec<Stage>,
    out_norms: Vec<ChannelNorm>,
}

impl Encoder {
    pub fn new(vb: VarBuilder, cfg: &EncoderConfig) -> Result<Self> {
        if cfg.base_channels < 8 {
            return Err(config_err!("base_channels must be >= 8, got {}", cfg.base_channels));
        }
        if cfg.window_size == 0 {
            return Err(config_err!("window_size must be >= 1"));
        }
        let widths = level_widths(cfg.base_channels);
        let mut downs = Vec::new();
        let mut stages = Vec::new();
        let mut out_norms = Vec::new();
        for i in 0..4 {
            let vb_i = vb.pp(format!("stage{i}"));
            let (c_in, k) = if i == 0 { (3, 4) } else { (widths[i - 1], 2) };
            let dim = widths[i];
            if !dim.is_multiple_of(cfg.heads[i]) {
                return Err(config_err!("stage {i}: width {dim} not divisible by {} heads", cfg.heads[i]));
            }
            downs.push((
                Conv::patch(vb_i.pp("down"), c_in, dim, k)?,
                ChannelNorm::new(vb_i.pp("down_norm"), dim)?,
            ));
            let stage = match cfg.kind {
                EncoderKind::Transformer => Stage::Transformer(
                    (0..cfg.depths[i])
                        .map(|j| WindowBlock::new(vb_i.pp(format!("block{j}")), dim, cfg.heads[i], cfg.mlp_ratio, cfg.window_size))
                        .collect::<candle_core::Result<_>>()?,
                ),
                EncoderKind::Conv => Stage::Conv(
                    (0..cfg.depths[i])
                        .map(|j| {
                            let vb_j = vb_i.pp(format!("block{j}"));
                            Ok((
                                ChannelNorm::new(vb_j.pp("norm"), dim)?,
                                Conv::same(vb_j.pp("conv1"), dim, dim * cfg.mlp_ratio, (3, 3))?,
                                Conv::same(vb_j.pp("conv2"), dim * cfg.mlp_ratio, dim, (3, 3))?,
                            ))
                        })
                        .collect::<candle_core::Result<_>>()?,
                ),
            };
            stages.push(stage);
            out_norms.push(ChannelNorm::new(vb_i.pp("out_norm"), dim)?);
        }
        Ok(Self {
            downs,
            stages,
            out_norms,
        })
    }

    /// `image` is a normalized `(B, 3, H, W)` tensor with `H`, `W` divisible
    /// by 32.
    pub fn encode(&self, image: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(shape_err!("encoder expects 3 input channels, got {c}"));
        }
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(shape_err!("input {h}x{w}: sides must be multiples of 32"));
        }
        let mut x = image.clone();
        let mut levels = Vec::with_capacity(4);
        for ((down, norm), (stage, out_norm)) in self.downs.iter().zip(self.stages.iter().zip(&self.out_norms)) {
            x = norm.forward(&down.forward(&x)?)?;
            match stage {
                Stage::Transformer(blocks) => {
                    for b in blocks {
                        x = b.forward(&x)?;
                    }
                }
                Stage::Conv(blocks) => {
                    for (n, c1, c2) in blocks {
                        let y = c2.forward(&c1.forward(&n.forward(&x)?)?.gelu()?)?;
                        x = (x + y)?;
                    }
                }
            }
            levels.push(out_norm.forward(&x)?);
        }
        let levels: [Tensor; 4] = levels.try_into().expect("four levels");
        Ok(FeaturePyramid { levels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    fn encoder(kind: EncoderKind) -> Encoder {
        let store = ParamStore::new(1);
        let cfg = EncoderConfig {
            kind,
            ..EncoderConfig::default()
        };
        Encoder::new(store.var_builder(DType::F32, &Device::Cpu), &cfg).unwrap()
    }

    #[test]
    fn pyramid_shapes() {
        for kind in [EncoderKind::Transformer, EncoderKind::Conv] {
            let enc = encoder(kind);
            let x = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
            let p = enc.encode(&x).unwrap();
            let dims: Vec<_> = p.levels.iter().map(|l| l.dims().to_vec()).collect();
            assert_eq!(
                dims,
                vec![vec![1, 16, 16, 16], vec![1, 32, 8, 8], vec![1, 64, 4, 4], vec![1, 128, 2, 2]]
            );
            for l in &p.levels {
                let v = l.flatten_all().unwrap().to_vec1::<f32>().unwrap();
                assert!(v.iter().all(|x| x.is_finite()));
            }
        }
    }

    #[test]
    fn non_divisible_input_is_shape_error() {
        let enc = encoder(EncoderKind::Conv);
        let x = Tensor::zeros((1, 3, 48, 64), DType::F32, &Device::Cpu).unwrap();
        let err = enc.encode(&x).unwrap_err();
        assert!(matches!(err, crate::error::Error::Shape(_)));
        assert!(err.to_string().contains("32"));
    }
}
