//! Small building blocks on top of candle: convolutions with rectangular
//! kernels, channel layer norm, and resampling expressed as fixed linear
//! maps so that every operation stays differentiable.

use candle_core::{DType, Module, Result, Tensor, D};
use candle_nn::{Init, VarBuilder};

/// 2D convolution with an arbitrary `kh x kw` kernel.
///
/// Stride-1 convolutions use "same" zero padding (`kh/2`, `kw/2`); strided
/// convolutions are unpadded patch projections.
#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    pad: (usize, usize),
}

impl Conv {
    fn build(
        vb: VarBuilder,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: usize,
        bias: bool,
        zero: bool,
    ) -> Result<Self> {
        let fan_in = c_in * kernel.0 * kernel.1;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let init = if zero {
            Init::Const(0.0)
        } else {
            Init::Uniform { lo: -bound, up: bound }
        };
        let weight = vb.get_with_hints((c_out, c_in, kernel.0, kernel.1), "weight", init)?;
        let bias = if bias {
            let init = if zero {
                Init::Const(0.0)
            } else {
                Init::Uniform { lo: -bound, up: bound }
            };
            Some(vb.get_with_hints(c_out, "bias", init)?)
        } else {
            None
        };
        let pad = if stride == 1 {
            (kernel.0 / 2, kernel.1 / 2)
        } else {
            (0, 0)
        };
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
        })
    }

    /// Stride-1 convolution preserving spatial size.
    pub fn same(vb: VarBuilder, c_in: usize, c_out: usize, kernel: (usize, usize)) -> Result<Self> {
        Self::build(vb, c_in, c_out, kernel, 1, true, false)
    }

    pub fn pointwise(vb: VarBuilder, c_in: usize, c_out: usize) -> Result<Self> {
        Self::same(vb, c_in, c_out, (1, 1))
    }

    pub fn pointwise_no_bias(vb: VarBuilder, c_in: usize, c_out: usize) -> Result<Self> {
        Self::build(vb, c_in, c_out, (1, 1), 1, false, false)
    }

    /// Zero-initialized stride-1 convolution (residual heads).
    pub fn same_zero(vb: VarBuilder, c_in: usize, c_out: usize, kernel: (usize, usize)) -> Result<Self> {
        Self::build(vb, c_in, c_out, kernel, 1, true, true)
    }

    /// Non-overlapping `k x k` patch projection with stride `k`.
    pub fn patch(vb: VarBuilder, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        Self::build(vb, c_in, c_out, (k, k), k, true, false)
    }

    /// Builds a stride-1 convolution from explicit tensors.
    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let (_, _, kh, kw) = weight.dims4()?;
        Ok(Self {
            weight,
            bias,
            stride: 1,
            pad: (kh / 2, kw / 2),
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0).unwrap_or(0)
    }
}

/// Geometry of a stride-1 patch extraction with zero padding.
#[derive(Debug, Clone, Copy)]
struct Patches {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
}

impl Patches {
    fn out_hw(&self) -> (usize, usize) {
        (self.h + 2 * self.ph + 1 - self.kh, self.w + 2 * self.pw + 1 - self.kw)
    }

    /// Calls `f(patch_index, image_index)` for every in-bounds tap of one
    /// batch item; the patch matrix is `(OH*OW, C*kh*kw)` row-major.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (oh, ow) = self.out_hw();
        let mut dst = 0;
        for y in 0..oh {
            for x in 0..ow {
                for c in 0..self.c {
                    for i in 0..self.kh {
                        let sy = y + i;
                        if sy < self.ph || sy >= self.h + self.ph {
                            dst += self.kw;
                            continue;
                        }
                        let src = (c * self.h + sy - self.ph) * self.w;
                        for j in 0..self.kw {
                            let sx = x + j;
                            if sx >= self.pw && sx < self.w + self.pw {
                                f(dst, src + sx - self.pw);
                            }
                            dst += 1;
                        }
                    }
                }
            }
        }
    }

    fn cols_len(&self) -> usize {
        let (oh, ow) = self.out_hw();
        self.c * self.kh * self.kw * oh * ow
    }
}

fn contiguous_slice<'a, T: candle_core::WithDType>(s: &'a [T], l: &candle_core::Layout) -> Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("patch extraction expects a contiguous input"),
    }
}

/// `(B, C, H, W) -> (B, OH*OW, C*kh*kw)` patch matrix.
struct Im2Col(Patches);

/// Adjoint of [`Im2Col`]: scatters-adds patch columns back onto the image.
struct Col2Im(Patches);

fn im2col<T: candle_core::WithDType>(src: &[T], p: &Patches, b: usize) -> Vec<T> {
    let (n_in, n_out) = (p.c * p.h * p.w, p.cols_len());
    let mut out = vec![T::zero(); b * n_out];
    for k in 0..b {
        let (x, y) = (&src[k * n_in..(k + 1) * n_in], &mut out[k * n_out..(k + 1) * n_out]);
        p.for_each_tap(|d, s| y[d] = x[s]);
    }
    out
}

fn col2im<T: candle_core::WithDType>(src: &[T], p: &Patches, b: usize) -> Vec<T> {
    let (n_img, n_cols) = (p.c * p.h * p.w, p.cols_len());
    let mut out = vec![T::zero(); b * n_img];
    for k in 0..b {
        let (x, y) = (&src[k * n_cols..(k + 1) * n_cols], &mut out[k * n_img..(k + 1) * n_img]);
        p.for_each_tap(|d, s| y[s] += x[d]);
    }
    out
}

impl candle_core::CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &candle_core::CpuStorage, l: &candle_core::Layout) -> Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let p = &self.0;
        let b = l.dims()[0];
        let (oh, ow) = p.out_hw();
        let out = match storage {
            S::F32(v) => S::F32(im2col(contiguous_slice(v, l)?, p, b)),
            S::F64(v) => S::F64(im2col(contiguous_slice(v, l)?, p, b)),
            _ => candle_core::bail!("im2col supports f32 and f64"),
        };
        Ok((out, (b, oh * ow, p.c * p.kh * p.kw).into()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl candle_core::CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &candle_core::CpuStorage, l: &candle_core::Layout) -> Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let p = &self.0;
        let b = l.dims()[0];
        let out = match storage {
            S::F32(v) => S::F32(col2im(contiguous_slice(v, l)?, p, b)),
            S::F64(v) => S::F64(col2im(contiguous_slice(v, l)?, p, b)),
            _ => candle_core::bail!("col2im supports f32 and f64"),
        };
        Ok((out, (b, p.c, p.h, p.w).into()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

impl Conv {
    /// Lowers the convolution to one matrix product over an explicit patch
    /// matrix; candle's native CPU convolution backward is far slower.
    fn im2col_forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (c_out, _, kh, kw) = self.weight.dims4()?;
        if kh == 1 && kw == 1 && self.stride == 1 {
            let wm = self.weight.reshape((c_out, c))?;
            return wm.broadcast_matmul(&x.reshape((b, c, h * w))?)?.reshape((b, c_out, h, w));
        }
        let (rows, oh, ow) = if self.stride == 1 {
            let p = Patches {
                c,
                h,
                w,
                kh,
                kw,
                ph: self.pad.0,
                pw: self.pad.1,
            };
            let (oh, ow) = p.out_hw();
            (x.contiguous()?.apply_op1(Im2Col(p))?, oh, ow)
        } else {
            // non-overlapping patches
            let k = self.stride;
            let (oh, ow) = (h / k, w / k);
            let x = x.narrow(2, 0, oh * k)?.narrow(3, 0, ow * k)?;
            let rows = x
                .reshape((b, c, oh, k, ow, k))?
                .permute((0, 2, 4, 1, 3, 5))?
                .contiguous()?;
            (rows, oh, ow)
        };
        let ckk = c * kh * kw;
        let wt = self.weight.reshape((c_out, ckk))?.t()?;
        rows.reshape((b * oh * ow, ckk))?
            .matmul(&wt)?
            .reshape((b, oh * ow, c_out))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, c_out, oh, ow))
    }
}

impl Module for Conv {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, kh, kw) = self.weight.dims4()?;
        if self.stride != 1 && (kh != self.stride || kw != self.stride) {
            return x.conv2d(&self.weight, 0, self.stride, 1, 1);
        }
        let y = self.im2col_forward(x)?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?),
            None => Ok(y),
        }
    }
}

/// Layer norm over the channel axis of an NCHW tensor.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl ChannelNorm {
    pub fn new(vb: VarBuilder, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints(channels, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(channels, "bias", Init::Const(0.0))?,
            eps: 1e-5,
        })
    }
}

impl Module for ChannelNorm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed
            .broadcast_mul(&self.weight.reshape((1, (), 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, (), 1, 1))?)
    }
}

/// Layer norm over the last axis (token layout).
#[derive(Debug, Clone)]
pub struct TokenNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl TokenNorm {
    pub fn new(vb: VarBuilder, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints(channels, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(channels, "bias", Init::Const(0.0))?,
            eps: 1e-5,
        })
    }
}

impl Module for TokenNorm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

/// Row-stochastic `out x inp` matrix of 1D bilinear interpolation with
/// half-pixel centers (the `align_corners = false` convention).
pub fn bilinear_matrix(inp: usize, out: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        let frac = src - i0 as f64;
        m[o * inp + i0] += 1.0 - frac;
        m[o * inp + i1] += frac;
    }
    m
}

/// `out x inp` matrix of adaptive average pooling: output cell `o` averages
/// inputs `floor(o*inp/out) .. ceil((o+1)*inp/out)`. Defined for any
/// `inp >= 1`, including `inp < out` where neighbouring bins overlap.
pub fn adaptive_pool_matrix(inp: usize, out: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    for o in 0..out {
        let start = o * inp / out;
        let end = ((o + 1) * inp).div_ceil(out);
        let w = 1.0 / (end - start) as f64;
        for i in start..end {
            m[o * inp + i] = w;
        }
    }
    m
}

/// Applies `rows` (H' x H) and `cols` (W' x W) to the spatial axes of an
/// NCHW tensor: `y = rows * x * cols^T` per channel.
fn apply_separable(x: &Tensor, rows: &[f64], out_h: usize, cols: &[f64], out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let dev = x.device();
    let dtype = x.dtype();
    let cols_t = Tensor::from_slice(cols, (out_w, w), dev)?.to_dtype(dtype)?.t()?;
    let y = x
        .contiguous()?
        .reshape((b * c * h, w))?
        .matmul(&cols_t)?
        .reshape((b, c, h, out_w))?;
    let rows_t = Tensor::from_slice(rows, (out_h, h), dev)?.to_dtype(dtype)?.t()?;
    y.transpose(2, 3)?
        .contiguous()?
        .reshape((b * c * out_w, h))?
        .matmul(&rows_t)?
        .reshape((b, c, out_w, out_h))?
        .transpose(2, 3)?
        .contiguous()
}

/// Bilinear resize of an NCHW tensor.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    apply_separable(x, &bilinear_matrix(h, out_h), out_h, &bilinear_matrix(w, out_w), out_w)
}

/// 2x bilinear upsampling.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    resize_bilinear(x, 2 * h, 2 * w)
}

/// Adaptive average pooling to an `out_h x out_w` grid.
pub fn adaptive_avg_pool(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    apply_separable(
        x,
        &adaptive_pool_matrix(h, out_h),
        out_h,
        &adaptive_pool_matrix(w, out_w),
        out_w,
    )
}

/// Logistic function with the pre-activation clamped to `[-15, 15]`, so the
/// result stays strictly inside (0, 1) even in single precision.
pub fn strict_sigmoid(x: &Tensor) -> Result<Tensor> {
    candle_nn::ops::sigmoid(&x.clamp(-15f32, 15f32)?)
}

/// Replicate-pads an NCHW tensor so both spatial sides become multiples of
/// `multiple`; returns the padded tensor and the `(top, left)` offsets.
pub fn pad_to_multiple(x: &Tensor, multiple: usize) -> Result<(Tensor, (usize, usize))> {
    let (_, _, h, w) = x.dims4()?;
    let th = h.div_ceil(multiple) * multiple;
    let tw = w.div_ceil(multiple) * multiple;
    let (top, left) = ((th - h) / 2, (tw - w) / 2);
    let x = x
        .pad_with_same(2, top, th - h - top)?
        .pad_with_same(3, left, tw - w - left)?;
    Ok((x, (top, left)))
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn interpolation_rows_sum_to_one() {
        for (i, o) in [(2, 4), (4, 2), (3, 6), (6, 3), (5, 5), (1, 7)] {
            for m in [bilinear_matrix(i, o), adaptive_pool_matrix(i, o)] {
                for r in 0..o {
                    let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bilinear_2x_matches_half_pixel_convention() {
        // torch.nn.functional.interpolate([0, 1, 2, 3], scale_factor=2, mode="linear")
        let m = bilinear_matrix(4, 8);
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = (0..8).map(|r| (0..4).map(|c| m[r * 4 + c] * x[c]).sum()).collect();
        let want = [0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0];
        for (a, b) in y.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{y:?}");
        }
    }

    #[test]
    fn adaptive_pool_of_constant_is_constant() {
        let x = Tensor::full(2.5f32, (1, 3, 5, 5), &Device::Cpu).unwrap();
        for g in [1, 2, 3, 6] {
            let y = adaptive_avg_pool(&x, g, g).unwrap();
            assert_eq!(y.dims4().unwrap(), (1, 3, g, g));
            for v in to_f64_vec(&y).unwrap() {
                assert!((v - 2.5).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn asymmetric_kernel_preserves_size() {
        let dev = Device::Cpu;
        let store = crate::params::ParamStore::new(0);
        let vb = store.var_builder(DType::F32, &dev);
        for k in [(1, 7), (7, 1), (1, 11), (11, 1), (3, 3)] {
            let conv = Conv::same(vb.pp(format!("c{}x{}", k.0, k.1)), 2, 3, k).unwrap();
            let x = Tensor::ones((1, 2, 9, 10), DType::F32, &dev).unwrap();
            assert_eq!(conv.forward(&x).unwrap().dims4().unwrap(), (1, 3, 9, 10));
        }
    }

    fn random(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn patch_matrix_conv_matches_direct_convolution() {
        for (i, (kh, kw)) in [(1, 1), (3, 3), (1, 7), (7, 1), (1, 11), (11, 1), (5, 3)].into_iter().enumerate() {
            for (h, w) in [(6, 7), (2, 3)] {
                let x = random((1, 3, h, w), i as u64);
                let wt = random((4, 3, kh, kw), 100 + i as u64);
                let b = Tensor::new(&[0.1f64, -0.2, 0.3, 0.0], &Device::Cpu).unwrap();
                let conv = Conv::from_tensors(wt.clone(), Some(b.clone())).unwrap();
                let ours = to_f64_vec(&conv.forward(&x).unwrap()).unwrap();
                let want = crate::oracles::conv2d_reference(
                    &to_f64_vec(&x).unwrap(),
                    (3, h, w),
                    &to_f64_vec(&wt).unwrap(),
                    (4, kh, kw),
                    Some(&to_f64_vec(&b).unwrap()),
                );
                let err = crate::oracles::max_relative_error(&ours, &want, 1e-9);
                assert!(err < 1e-12, "{kh}x{kw} on {h}x{w}: {err}");
            }
        }
    }

    #[test]
    fn patch_matrix_conv_gradients_match_finite_differences() {
        use crate::oracles::{finite_diff_grad, max_relative_error};
        for (i, k) in [(3, 3), (1, 7), (11, 1)].into_iter().enumerate() {
            let x = random((2, 3, 5, 6), i as u64);
            let wt = random((4, 3, k.0, k.1), 50 + i as u64);
            let probe = random((2, 4, 5, 6), 7);
            let loss = |x: &Tensor, wt: &Tensor| -> Tensor {
                let conv = Conv::from_tensors(wt.clone(), None).unwrap();
                (conv.forward(x).unwrap() * &probe).unwrap().sum_all().unwrap()
            };
            let (xv, wv) = (candle_core::Var::from_tensor(&x).unwrap(), candle_core::Var::from_tensor(&wt).unwrap());
            let grads = loss(xv.as_tensor(), wv.as_tensor()).backward().unwrap();
            let gx = to_f64_vec(grads.get(xv.as_tensor()).unwrap()).unwrap();
            let gw = to_f64_vec(grads.get(wv.as_tensor()).unwrap()).unwrap();
            let scalar = |t: Tensor| t.to_scalar::<f64>().unwrap();
            let fx = finite_diff_grad(
                |p| scalar(loss(&Tensor::from_slice(p, x.dims(), &Device::Cpu).unwrap(), &wt)),
                &to_f64_vec(&x).unwrap(),
                1e-6,
            )
            .unwrap();
            let fw = finite_diff_grad(
                |p| scalar(loss(&x, &Tensor::from_slice(p, wt.dims(), &Device::Cpu).unwrap())),
                &to_f64_vec(&wt).unwrap(),
                1e-6,
            )
            .unwrap();
            assert!(max_relative_error(&gx, &fx, 1e-9) < 1e-7, "{k:?} input gradient");
            assert!(max_relative_error(&gw, &fw, 1e-9) < 1e-7, "{k:?} weight gradient");
        }
    }

    #[test]
    fn patch_conv_matches_strided_native() {
        let x = random((2, 3, 8, 12), 1);
        let wt = random((5, 3, 4, 4), 2);
        let conv = Conv::from_tensors(wt.clone(), None).unwrap();
        let conv = Conv { stride: 4, pad: (0, 0), ..conv };
        let ours = to_f64_vec(&conv.forward(&x).unwrap()).unwrap();
        let want = to_f64_vec(&x.conv2d(&wt, 0, 4, 1, 1).unwrap()).unwrap();
        assert!(crate::oracles::max_relative_error(&ours, &want, 1e-9) < 1e-12);
    }

    #[test]
    fn pad_to_multiple_centers_content() {
        let x = Tensor::arange(0f32, 30.0, &Device::Cpu).unwrap().reshape((1, 1, 5, 6)).unwrap();
        let (p, (top, left)) = pad_to_multiple(&x, 4).unwrap();
        assert_eq!(p.dims4().unwrap(), (1, 1, 8, 8));
        let back = p.narrow(2, top, 5).unwrap().narrow(3, left, 6).unwrap();
        assert_eq!(to_f64_vec(&back).unwrap(), to_f64_vec(&x).unwrap());
    }
}
