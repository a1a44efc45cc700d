//! Non-overlapping window attention over NCHW feature maps.

use candle_core::{Module, Result, Tensor, D};
use candle_nn::{Linear, VarBuilder};

use crate::layers::TokenNorm;

/// Largest window side `<= n` that tiles `side`.
pub fn window_for(n: usize, side: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    gcd(n, side).max(1)
}

/// `(B, C, H, W)` -> `(B * H/wh * W/ww, wh * ww, C)`.
pub fn window_partition(x: &Tensor, wh: usize, ww: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % wh != 0 || w % ww != 0 {
        candle_core::bail!("window {wh}x{ww} does not tile a {h}x{w} map");
    }
    x.reshape((b, c, h / wh, wh, w / ww, ww))?
        .permute((0, 2, 4, 3, 5, 1))?
        .contiguous()?
        .reshape((b * (h / wh) * (w / ww), wh * ww, c))
}

/// Inverse of [`window_partition`].
pub fn window_reverse(t: &Tensor, (b, c, h, w): (usize, usize, usize, usize), wh: usize, ww: usize) -> Result<Tensor> {
    t.reshape((b, h / wh, w / ww, wh, ww, c))?
        .permute((0, 5, 1, 3, 2, 4))?
        .contiguous()?
        .reshape((b, c, h, w))
}

fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (n, t, c) = x.dims3()?;
    x.reshape((n, t, heads, c / heads))?.transpose(1, 2)?.contiguous()
}

fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (n, heads, t, d) = x.dims4()?;
    x.transpose(1, 2)?.contiguous()?.reshape((n, t, heads * d))
}

/// Softmax attention weights `(N, heads, Tq, Tk)`.
pub fn attention_probs(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let d = q.dim(D::Minus1)?;
    let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (d as f64).sqrt()))?;
    candle_nn::ops::softmax(&scores, D::Minus1)
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(vb: VarBuilder, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: candle_nn::linear(dim, hidden, vb.pp("fc1"))?,
            fc2: candle_nn::linear(hidden, dim, vb.pp("fc2"))?,
        })
    }
}

impl Module for Mlp {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Pre-norm transformer block with windowed multi-head self-attention.
#[derive(Debug, Clone)]
pub struct WindowBlock {
    norm1: TokenNorm,
    qkv: Linear,
    proj: Linear,
    norm2: TokenNorm,
    mlp: Mlp,
    heads: usize,
    window: usize,
}

impl WindowBlock {
    pub fn new(vb: VarBuilder, dim: usize, heads: usize, mlp_ratio: usize, window: usize) -> Result<Self> {
        if !dim.is_multiple_of(heads) {
            candle_core::bail!("width {dim} is not divisible by {heads} heads");
        }
        Ok(Self {
            norm1: TokenNorm::new(vb.pp("norm1"), dim)?,
            qkv: candle_nn::linear(dim, 3 * dim, vb.pp("qkv"))?,
            proj: candle_nn::linear(dim, dim, vb.pp("proj"))?,
            norm2: TokenNorm::new(vb.pp("norm2"), dim)?,
            mlp: Mlp::new(vb.pp("mlp"), dim, dim * mlp_ratio)?,
            heads,
            window,
        })
    }
}

impl Module for WindowBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims4()?;
        let (_, c, h, w) = dims;
        let (wh, ww) = (window_for(self.window, h), window_for(self.window, w));
        let tokens = window_partition(x, wh, ww)?;
        let qkv = self.qkv.forward(&self.norm1.forward(&tokens)?)?;
        let q = split_heads(&qkv.narrow(D::Minus1, 0, c)?, self.heads)?;
        let k = split_heads(&qkv.narrow(D::Minus1, c, c)?, self.heads)?;
        let v = split_heads(&qkv.narrow(D::Minus1, 2 * c, c)?, self.heads)?;
        let attn = attention_probs(&q, &k)?.matmul(&v)?;
        let tokens = (&tokens + self.proj.forward(&merge_heads(&attn)?)?)?;
        let tokens = (&tokens + self.mlp.forward(&self.norm2.forward(&tokens)?)?)?;
        window_reverse(&tokens, dims, wh, ww)
    }
}

/// Windowed cross-attention: queries from the decoder path, keys and values
/// from an encoder skip of the same spatial size, then a feed-forward layer.
#[derive(Debug, Clone)]
pub struct CrossWindowBlock {
    norm_q: TokenNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    norm2: TokenNorm,
    mlp: Mlp,
    heads: usize,
    window: usize,
}

impl CrossWindowBlock {
    pub fn new(
        vb: VarBuilder,
        dim: usize,
        skip_dim: usize,
        heads: usize,
        mlp_ratio: usize,
        window: usize,
        value_bias: bool,
    ) -> Result<Self> {
        if !dim.is_multiple_of(heads) {
            candle_core::bail!("width {dim} is not divisible by {heads} heads");
        }
        let v = if value_bias {
            candle_nn::linear(skip_dim, dim, vb.pp("v"))?
        } else {
            candle_nn::linear_no_bias(skip_dim, dim, vb.pp("v"))?
        };
        Ok(Self {
            norm_q: TokenNorm::new(vb.pp("norm_q"), dim)?,
            q: candle_nn::linear(dim, dim, vb.pp("q"))?,
            k: candle_nn::linear(skip_dim, dim, vb.pp("k"))?,
            v,
            proj: candle_nn::linear_no_bias(dim, dim, vb.pp("proj"))?,
            norm2: TokenNorm::new(vb.pp("norm2"), dim)?,
            mlp: Mlp::new(vb.pp("mlp"), dim, dim * mlp_ratio)?,
            heads,
            window,
        })
    }

    fn windows(&self, x: &Tensor) -> Result<(usize, usize)> {
        let (_, _, h, w) = x.dims4()?;
        Ok((window_for(self.window, h), window_for(self.window, w)))
    }

    fn qkv(&self, x_tok: &Tensor, s_tok: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let q = split_heads(&self.q.forward(&self.norm_q.forward(x_tok)?)?, self.heads)?;
        let k = split_heads(&self.k.forward(s_tok)?, self.heads)?;
        let v = split_heads(&self.v.forward(s_tok)?, self.heads)?;
        Ok((q, k, v))
    }

    /// Per-window attention weights `(B * windows, heads, T, T)`.
    pub fn attention_weights(&self, x: &Tensor, skip: &Tensor) -> Result<Tensor> {
        let (wh, ww) = self.windows(x)?;
        let (q, k, _) = self.qkv(&window_partition(x, wh, ww)?, &window_partition(skip, wh, ww)?)?;
        attention_probs(&q, &k)
    }

    /// The block output with the attention contribution removed.
    pub fn residual_path(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims4()?;
        let (wh, ww) = self.windows(x)?;
        let tokens = window_partition(x, wh, ww)?;
        let tokens = (&tokens + self.mlp.forward(&self.norm2.forward(&tokens)?)?)?;
        window_reverse(&tokens, dims, wh, ww)
    }

    pub fn forward(&self, x: &Tensor, skip: &Tensor) -> Result<Tensor> {
        let dims = x.dims4()?;
        let (wh, ww) = self.windows(x)?;
        let tokens = window_partition(x, wh, ww)?;
        let (q, k, v) = self.qkv(&tokens, &window_partition(skip, wh, ww)?)?;
        let attn = attention_probs(&q, &k)?.matmul(&v)?;
        let tokens = (&tokens + self.proj.forward(&merge_heads(&attn)?)?)?;
        let tokens = (&tokens + self.mlp.forward(&self.norm2.forward(&tokens)?)?)?;
        window_reverse(&tokens, dims, wh, ww)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn partition_round_trip() {
        let x = Tensor::arange(0f32, 2.0 * 3.0 * 4.0 * 6.0, &Device::Cpu)
            .unwrap()
            .reshape((2, 3, 4, 6))
            .unwrap();
        let t = window_partition(&x, 2, 3).unwrap();
        assert_eq!(t.dims(), &[2 * 2 * 2, 6, 3]);
        // first window, first token holds channel values of pixel (0, 0)
        let first = t.get(0).unwrap().get(0).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(first, vec![0.0, 24.0, 48.0]);
        let back = window_reverse(&t, (2, 3, 4, 6), 2, 3).unwrap();
        let diff = (back - &x).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn window_sizes_tile() {
        assert_eq!(window_for(4, 16), 4);
        assert_eq!(window_for(4, 6), 2);
        assert_eq!(window_for(4, 3), 1);
        assert_eq!(window_for(8, 12), 4);
    }
}
