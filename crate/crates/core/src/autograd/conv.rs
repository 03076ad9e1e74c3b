//! Convolution and batch-norm primitives for the tape.
//!
//! Convolution is im2col + matrix multiply, the backward pass reuses the same
//! column buffers. Only what the generators/discriminators need is supported:
//! square kernels, uniform stride/padding/dilation, NCHW layout.

use ndarray::{Array2, ArrayD, Axis, Ix1, IxDyn};

use super::{dims4, Arr, Var};

/// Output spatial size of a convolution along one axis.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize, dilation: usize) -> usize {
    let eff = dilation * (kernel - 1) + 1;
    (input + 2 * pad - eff) / stride + 1
}

fn im2col(
    x: &Arr,
    sample: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
    ho: usize,
    wo: usize,
) -> Array2<f32> {
    let (_, c, h, w) = dims4(x);
    let mut col = Array2::<f32>::zeros((c * kh * kw, ho * wo));
    let cs = col.as_slice_mut().unwrap();
    let owned;
    let xsl = match x.as_slice() {
        Some(s) => s,
        None => {
            owned = x.as_standard_layout().into_owned();
            owned.as_slice().unwrap()
        }
    };
    let sbase = sample * c * h * w;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let rbase = row * ho * wo;
                let shift = (kx * dilation) as isize - pad as isize;
                for oy in 0..ho {
                    let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let srow = sbase + (ci * h + iy as usize) * w;
                    let drow = rbase + oy * wo;
                    if stride == 1 {
                        let ox0 = (-shift).max(0) as usize;
                        let ox1 = wo.min((w as isize - shift).max(0) as usize);
                        if ox0 < ox1 {
                            let i0 = (ox0 as isize + shift) as usize;
                            cs[drow + ox0..drow + ox1]
                                .copy_from_slice(&xsl[srow + i0..srow + i0 + (ox1 - ox0)]);
                        }
                    } else {
                        for ox in 0..wo {
                            let ix = (ox * stride) as isize + shift;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cs[drow + ox] = xsl[srow + ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im_accumulate(
    col: &Array2<f32>,
    out: &mut Arr,
    sample: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
    ho: usize,
    wo: usize,
) {
    let (_, c, h, w) = dims4(out);
    let osl = out.as_slice_mut().unwrap();
    let csl = col.as_slice().unwrap();
    let sbase = sample * c * h * w;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let rbase = row * ho * wo;
                let shift = (kx * dilation) as isize - pad as isize;
                for oy in 0..ho {
                    let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let srow = sbase + (ci * h + iy as usize) * w;
                    let drow = rbase + oy * wo;
                    if stride == 1 {
                        let ox0 = (-shift).max(0) as usize;
                        let ox1 = wo.min((w as isize - shift).max(0) as usize);
                        if ox0 < ox1 {
                            let i0 = (ox0 as isize + shift) as usize;
                            for (d, s) in osl[srow + i0..srow + i0 + (ox1 - ox0)]
                                .iter_mut()
                                .zip(&csl[drow + ox0..drow + ox1])
                            {
                                *d += s;
                            }
                        }
                    } else {
                        for ox in 0..wo {
                            let ix = (ox * stride) as isize + shift;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            osl[srow + ix as usize] += csl[drow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Var {
    /// 2-D convolution, NCHW input `(N,C,H,W)` with weight `(O,C,KH,KW)`.
    /// No bias here; compose with [`Var::add_channel_bias`].
    pub fn conv2d(&self, weight: &Var, stride: usize, pad: usize, dilation: usize) -> Var {
        let x = self.value();
        let wt = weight.value();
        let (n, c, h, w) = dims4(&x);
        let ws = wt.shape().to_vec();
        assert_eq!(ws.len(), 4);
        let (o, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(wc, c, "conv2d channel mismatch: input {c}, weight {wc}");
        let ho = conv_out_size(h, kh, stride, pad, dilation);
        let wo = conv_out_size(w, kw, stride, pad, dilation);
        let wmat = wt
            .clone()
            .into_shape(IxDyn(&[o, c * kh * kw]))
            .unwrap()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut out = ArrayD::<f32>::zeros(IxDyn(&[n, o, ho, wo]));
        for s in 0..n {
            let col = im2col(&x, s, kh, kw, stride, pad, dilation, ho, wo);
            let res = wmat.dot(&col); // (O, Ho*Wo)
            out.index_axis_mut(Axis(0), s)
                .as_slice_mut()
                .unwrap()
                .copy_from_slice(res.as_slice().unwrap());
        }
        self.binary(weight, out, move |x, wt, g| {
            let (n, c, _h, _w) = dims4(x);
            let wmat = wt
                .clone()
                .into_shape(IxDyn(&[o, c * kh * kw]))
                .unwrap()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let mut gx = ArrayD::<f32>::zeros(x.raw_dim());
            let mut gw = Array2::<f32>::zeros((o, c * kh * kw));
            for s in 0..n {
                let gsample = g.index_axis(Axis(0), s);
                let gmat =
                    Array2::from_shape_vec((o, ho * wo), gsample.iter().copied().collect())
                        .unwrap();
                let col = im2col(x, s, kh, kw, stride, pad, dilation, ho, wo);
                gw += &gmat.dot(&col.t());
                let gcol = wmat.t().dot(&gmat);
                col2im_accumulate(&gcol, &mut gx, s, kh, kw, stride, pad, dilation, ho, wo);
            }
            let gw = gw.into_shape((o, c, kh, kw)).unwrap().into_dyn();
            (gx, gw)
        })
    }

    /// Add a `(C,)` bias to every channel of a `(N,C,H,W)` tensor.
    pub fn add_channel_bias(&self, bias: &Var) -> Var {
        let x = self.value();
        let b = bias.value().into_dimensionality::<Ix1>().unwrap();
        let (n, c, h, w) = dims4(&x);
        assert_eq!(b.len(), c);
        let mut out = x.clone();
        for s in 0..n {
            for ci in 0..c {
                let mut chan = out.slice_mut(ndarray::s![s, ci, .., ..]);
                chan += b[ci];
            }
        }
        let _ = (h, w);
        self.binary(bias, out, |_, b, g| {
            let c = b.len();
            let mut gb = ArrayD::<f32>::zeros(IxDyn(&[c]));
            for ci in 0..c {
                gb[ci] = g.slice(ndarray::s![.., ci, .., ..]).sum();
            }
            (g.clone(), gb)
        })
    }

    /// Batch normalization over a `(N,C,H,W)` tensor with per-channel affine.
    ///
    /// `mean`/`var` are the statistics to normalize with (batch statistics in
    /// training, running averages in eval). When `batch_stats` is true the
    /// backward pass differentiates through the statistics.
    pub fn batch_norm(
        &self,
        gamma: &Var,
        beta: &Var,
        mean: &[f32],
        var: &[f32],
        batch_stats: bool,
        eps: f32,
    ) -> Var {
        let x = self.value();
        let (n, c, h, w) = dims4(&x);
        assert_eq!(mean.len(), c);
        let g_val = gamma.value().into_dimensionality::<Ix1>().unwrap();
        let b_val = beta.value().into_dimensionality::<Ix1>().unwrap();
        let invstd: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = x.clone();
        for ci in 0..c {
            let mut chan = xhat.slice_mut(ndarray::s![.., ci, .., ..]);
            chan.mapv_inplace(|v| (v - mean[ci]) * invstd[ci]);
        }
        let mut out = xhat.clone();
        for ci in 0..c {
            let mut chan = out.slice_mut(ndarray::s![.., ci, .., ..]);
            chan.mapv_inplace(|v| v * g_val[ci] + b_val[ci]);
        }
        let xhat_c = xhat;
        let invstd_c = invstd;
        let a = self.idx;
        let gm = gamma.idx;
        let bt = beta.idx;
        assert!(std::rc::Rc::ptr_eq(&self.graph.inner, &gamma.graph.inner));
        assert!(std::rc::Rc::ptr_eq(&self.graph.inner, &beta.graph.inner));
        self.graph.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let gamma_v = vals[gm].view().into_dimensionality::<Ix1>().unwrap();
                let m = (n * h * w) as f32;
                let mut gx = ArrayD::<f32>::zeros(vals[a].raw_dim());
                let mut ggamma = ArrayD::<f32>::zeros(IxDyn(&[c]));
                let mut gbeta = ArrayD::<f32>::zeros(IxDyn(&[c]));
                for ci in 0..c {
                    let gch = g.slice(ndarray::s![.., ci, .., ..]);
                    let xh = xhat_c.slice(ndarray::s![.., ci, .., ..]);
                    let sum_g: f32 = gch.sum();
                    let sum_gx: f32 = gch
                        .iter()
                        .zip(xh.iter())
                        .map(|(a, b)| a * b)
                        .sum();
                    ggamma[ci] = sum_gx;
                    gbeta[ci] = sum_g;
                    let k = gamma_v[ci] * invstd_c[ci];
                    let mut dst = gx.slice_mut(ndarray::s![.., ci, .., ..]);
                    if batch_stats {
                        for ((d, &gv), &xv) in dst.iter_mut().zip(gch.iter()).zip(xh.iter()) {
                            *d = k * (gv - sum_g / m - xv * sum_gx / m);
                        }
                    } else {
                        for (d, &gv) in dst.iter_mut().zip(gch.iter()) {
                            *d = k * gv;
                        }
                    }
                }
                sink(a, gx);
                sink(gm, ggamma);
                sink(bt, gbeta);
            })),
        )
    }
}
