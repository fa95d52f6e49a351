//! Raw forward/backward loops for the spatial ops. Every output element is
//! accumulated in a fixed order, so results are bitwise reproducible.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub padding: usize,
}

pub(crate) fn conv_geom<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeom> {
    let [n, in_c, in_h, in_w] = input.dims4("conv2d")?;
    let [out_c, w_in, k_h, k_w] = weight.dims4("conv2d")?;
    if w_in != in_c {
        return Err(Error::shape("conv2d", input.shape(), weight.shape()));
    }
    if bias.shape() != [out_c] {
        return Err(Error::shape("conv2d bias", bias.shape(), &[out_c]));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be >= 1"));
    }
    let padded_h = in_h + 2 * padding;
    let padded_w = in_w + 2 * padding;
    if padded_h < k_h || padded_w < k_w {
        return Err(Error::shape("conv2d kernel", input.shape(), weight.shape()));
    }
    Ok(ConvGeom {
        n,
        in_c,
        in_h,
        in_w,
        out_c,
        k_h,
        k_w,
        out_h: (padded_h - k_h) / stride + 1,
        out_w: (padded_w - k_w) / stride + 1,
        stride,
        padding,
    })
}

/// Valid output range along one axis for kernel offset `k`: all `o` with
/// `0 <= o*stride + k - pad < in_len`.
#[inline]
fn out_range(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let start = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // largest o with o*stride + k - pad <= in_len - 1
    let limit = in_len + pad;
    let end = if limit <= k {
        0
    } else {
        ((limit - k - 1) / stride + 1).min(out_len)
    };
    (start, end.max(start))
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let mut out = vec![T::zero(); g.n * g.out_c * out_plane];
    for n in 0..g.n {
        for o in 0..g.out_c {
            let dst = &mut out[(n * g.out_c + o) * out_plane..][..out_plane];
            dst.fill(bias[o]);
            for i in 0..g.in_c {
                let src = &input[(n * g.in_c + i) * in_plane..][..in_plane];
                for kh in 0..g.k_h {
                    let (oh0, oh1) = out_range(kh, g.padding, g.stride, g.in_h, g.out_h);
                    for kw in 0..g.k_w {
                        let wv = weight[((o * g.in_c + i) * g.k_h + kh) * g.k_w + kw];
                        let (ow0, ow1) = out_range(kw, g.padding, g.stride, g.in_w, g.out_w);
                        for oh in oh0..oh1 {
                            let ih = oh * g.stride + kh - g.padding;
                            let row = &src[ih * g.in_w..][..g.in_w];
                            let drow = &mut dst[oh * g.out_w..][..g.out_w];
                            for ow in ow0..ow1 {
                                let iw = ow * g.stride + kw - g.padding;
                                drow[ow] = drow[ow] + wv * row[iw];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    want: [bool; 3],
) -> ConvGrads<T> {
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let mut gi = want[0].then(|| vec![T::zero(); input.len()]);
    let mut gw = want[1].then(|| vec![T::zero(); weight.len()]);
    let gb = want[2].then(|| {
        (0..g.out_c)
            .map(|o| {
                (0..g.n)
                    .map(|n| {
                        grad_out[(n * g.out_c + o) * out_plane..][..out_plane]
                            .iter()
                            .copied()
                            .sum::<T>()
                    })
                    .sum()
            })
            .collect()
    });
    if gi.is_some() || gw.is_some() {
        for n in 0..g.n {
            for o in 0..g.out_c {
                let go = &grad_out[(n * g.out_c + o) * out_plane..][..out_plane];
                for i in 0..g.in_c {
                    let base = (n * g.in_c + i) * in_plane;
                    for kh in 0..g.k_h {
                        let (oh0, oh1) = out_range(kh, g.padding, g.stride, g.in_h, g.out_h);
                        for kw in 0..g.k_w {
                            let widx = ((o * g.in_c + i) * g.k_h + kh) * g.k_w + kw;
                            let wv = weight[widx];
                            let (ow0, ow1) = out_range(kw, g.padding, g.stride, g.in_w, g.out_w);
                            let mut acc = T::zero();
                            for oh in oh0..oh1 {
                                let ih = oh * g.stride + kh - g.padding;
                                let grow = &go[oh * g.out_w..][..g.out_w];
                                let xrow = &input[base + ih * g.in_w..][..g.in_w];
                                if let Some(gi) = gi.as_mut() {
                                    let girow = &mut gi[base + ih * g.in_w..][..g.in_w];
                                    for ow in ow0..ow1 {
                                        let iw = ow * g.stride + kw - g.padding;
                                        girow[iw] = girow[iw] + wv * grow[ow];
                                    }
                                }
                                for ow in ow0..ow1 {
                                    let iw = ow * g.stride + kw - g.padding;
                                    acc = acc + xrow[iw] * grow[ow];
                                }
                            }
                            if let Some(gw) = gw.as_mut() {
                                gw[widx] = gw[widx] + acc;
                            }
                        }
                    }
                }
            }
        }
    }
    ConvGrads {
        input: gi,
        weight: gw,
        bias: gb,
    }
}

/// Source taps for align-corners=false upsampling along one axis: output
/// index `i` samples position `(i + 0.5) / factor - 0.5`, clamped to the
/// input extent.
pub(crate) fn upsample_taps(in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..in_len * factor)
        .map(|i| {
            let pos = ((i as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = pos - i0 as f64;
            (i0, i1, if i0 == i1 { 0.0 } else { frac })
        })
        .collect()
}

pub(crate) fn upsample_forward<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4("bilinear_upsample")?;
    if factor == 0 {
        return Err(Error::invalid("upsample factor must be >= 1"));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let (oh, ow) = (h * factor, w * factor);
    let ty = upsample_taps(h, factor);
    let tx = upsample_taps(w, factor);
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let p = &src[plane * h * w..][..h * w];
        for &(y0, y1, fy) in &ty {
            let fy = T::cast(fy);
            for &(x0, x1, fx) in &tx {
                let fx = T::cast(fx);
                let top = p[y0 * w + x0] * (T::one() - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (T::one() - fx) + p[y1 * w + x1] * fx;
                out.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub(crate) fn upsample_backward<T: Real>(in_shape: &[usize], factor: usize, grad_out: &[T]) -> Vec<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let planes = in_shape[0] * in_shape[1];
    if factor == 1 {
        return grad_out.to_vec();
    }
    let ty = upsample_taps(h, factor);
    let tx = upsample_taps(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    let mut gi = vec![T::zero(); planes * h * w];
    for plane in 0..planes {
        let gp = &mut gi[plane * h * w..][..h * w];
        let go = &grad_out[plane * oh * ow..][..oh * ow];
        for (yi, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::cast(fy);
            for (xi, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::cast(fx);
                let g = go[yi * ow + xi];
                let gt = g * (T::one() - fy);
                let gb = g * fy;
                gp[y0 * w + x0] = gp[y0 * w + x0] + gt * (T::one() - fx);
                gp[y0 * w + x1] = gp[y0 * w + x1] + gt * fx;
                gp[y1 * w + x0] = gp[y1 * w + x0] + gb * (T::one() - fx);
                gp[y1 * w + x1] = gp[y1 * w + x1] + gb * fx;
            }
        }
    }
    gi
}
