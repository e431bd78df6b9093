//! 2-D convolution, nearest upsampling, and NCHW<->rows layout ops.
//!
//! Convolution is im2col plus the gemm kernels, parallel over batch images.
//! Weight-gradient partials are computed per image and summed in batch
//! order, so results are bit-stable under any thread count.

use super::{gemm_nn, gemm_nt, gemm_tn, Op, Tape, Var};
use crate::tensor::{Scalar, Tensor};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

fn out_extent(input: usize, k: usize, spec: Conv2dSpec) -> usize {
    assert!(
        input + 2 * spec.pad >= k,
        "conv kernel {k} larger than padded input {input}+2*{}",
        spec.pad
    );
    (input + 2 * spec.pad - k) / spec.stride + 1
}

/// Scatter one image into im2col layout [OH*OW, Cin*k*k].
fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    spec: Conv2dSpec,
    cols: &mut [T],
) {
    let oh = out_extent(h, k, spec);
    let ow = out_extent(w, k, spec);
    let kk = k * k;
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * cin * kk;
            for ci in 0..cin {
                for ky in 0..k {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    for kx in 0..k {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        let v = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            x[ci * h * w + iy as usize * w + ix as usize]
                        } else {
                            T::zero()
                        };
                        cols[base + ci * kk + ky * k + kx] = v;
                    }
                }
            }
        }
    }
}

/// Scatter-add im2col-layout gradients back into an image.
fn col2im_add<T: Scalar>(
    cols: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    spec: Conv2dSpec,
    dx: &mut [T],
) {
    let oh = out_extent(h, k, spec);
    let ow = out_extent(w, k, spec);
    let kk = k * k;
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * cin * kk;
            for ci in 0..cin {
                for ky in 0..k {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let t = ci * h * w + iy as usize * w + ix as usize;
                        dx[t] = dx[t] + cols[base + ci * kk + ky * k + kx];
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// x[B,Cin,H,W] ∗ w[Cout,Cin,k,k] + b[Cout] -> [B,Cout,OH,OW].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: Conv2dSpec) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let (batch, cin, h, wd) = xv.dims4();
        let (cout, wcin, kh, kw) = wv.dims4();
        assert_eq!(kh, kw, "only square kernels, got {kh}x{kw}");
        assert_eq!(
            cin, wcin,
            "conv channel mismatch: input {:?} vs weight {:?}",
            xv.shape(),
            wv.shape()
        );
        assert_eq!(bv.numel(), cout, "conv bias size");
        let k = kh;
        let oh = out_extent(h, k, spec);
        let ow = out_extent(wd, k, spec);
        let ohow = oh * ow;
        let ckk = cin * k * k;

        let mut out = vec![T::zero(); batch * cout * ohow];
        let xdata = xv.data();
        let wdata = wv.data();
        let bdata = bv.data();
        out.par_chunks_mut(cout * ohow).enumerate().for_each(|(bi, out_img)| {
            let mut cols = vec![T::zero(); ohow * ckk];
            im2col(&xdata[bi * cin * h * wd..(bi + 1) * cin * h * wd], cin, h, wd, k, spec, &mut cols);
            // [Cout, OHOW] = W[Cout, CKK] · colsᵀ
            let prod = gemm_nt(wdata, &cols, cout, ckk, ohow);
            for co in 0..cout {
                let bias = bdata[co];
                for (o, p) in out_img[co * ohow..(co + 1) * ohow]
                    .iter_mut()
                    .zip(&prod[co * ohow..(co + 1) * ohow])
                {
                    *o = *p + bias;
                }
            }
        });

        self.push_derived(
            Tensor::new(vec![batch, cout, oh, ow], out),
            Op::Conv2d { x: x.id, w: w.id, b: b.id, spec },
            &[x.id, w.id, b.id],
        )
    }

    /// Nearest-neighbor 2x upsampling: [B,C,H,W] -> [B,C,2H,2W].
    pub fn upsample_nearest_2x(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (b, c, h, w) = xv.dims4();
        let mut out = vec![T::zero(); b * c * 4 * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        for img in 0..b * c {
            let src = &xv.data()[img * h * w..(img + 1) * h * w];
            let dst = &mut out[img * oh * ow..(img + 1) * oh * ow];
            for y in 0..oh {
                for x_ in 0..ow {
                    dst[y * ow + x_] = src[(y / 2) * w + x_ / 2];
                }
            }
        }
        self.push_derived(
            Tensor::new(vec![b, c, oh, ow], out),
            Op::UpsampleNearest2x(x.id),
            &[x.id],
        )
    }

    /// [B,D,h,w] -> [B*h*w, D]: one row per spatial site in raster order.
    pub fn nchw_to_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (b, d, h, w) = xv.dims4();
        let mut out = vec![T::zero(); b * h * w * d];
        for bi in 0..b {
            for di in 0..d {
                for y in 0..h {
                    for x_ in 0..w {
                        out[(bi * h * w + y * w + x_) * d + di] =
                            xv.data()[((bi * d + di) * h + y) * w + x_];
                    }
                }
            }
        }
        self.push_derived(Tensor::new(vec![b * h * w, d], out), Op::NchwToRows(x.id), &[x.id])
    }

    /// [B*h*w, D] -> [B,D,h,w], inverse of [`Tape::nchw_to_rows`].
    pub fn rows_to_nchw(&mut self, x: Var, b: usize, d: usize, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dims2();
        assert_eq!(rows, b * h * w, "rows_to_nchw row count");
        assert_eq!(cols, d, "rows_to_nchw feature dim");
        let mut out = vec![T::zero(); b * d * h * w];
        for bi in 0..b {
            for di in 0..d {
                for y in 0..h {
                    for x_ in 0..w {
                        out[((bi * d + di) * h + y) * w + x_] =
                            xv.data()[(bi * h * w + y * w + x_) * d + di];
                    }
                }
            }
        }
        self.push_derived(
            Tensor::new(vec![b, d, h, w], out),
            Op::RowsToNchw { x: x.id, dims: (b, d, h, w) },
            &[x.id],
        )
    }
}

pub(super) fn conv2d_backward<T: Scalar>(
    tape: &Tape<T>,
    x: usize,
    w: usize,
    b: usize,
    spec: &Conv2dSpec,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let xv = tape.value_of(x);
    let wv = tape.value_of(w);
    let (batch, cin, h, wd) = xv.dims4();
    let (cout, _, k, _) = wv.dims4();
    let oh = out_extent(h, k, *spec);
    let ow = out_extent(wd, k, *spec);
    let ohow = oh * ow;
    let ckk = cin * k * k;
    let xdata = xv.data();
    let wdata = wv.data();
    let gdata = g.data();
    let need_x = tape.requires_grad_id(x);
    let need_w = tape.requires_grad_id(w);
    let need_b = tape.requires_grad_id(b);

    struct PerImage<T> {
        dx: Option<Vec<T>>,
        dw: Option<Vec<T>>,
        db: Option<Vec<T>>,
    }

    let per_image: Vec<PerImage<T>> = (0..batch)
        .into_par_iter()
        .map(|bi| {
            let gi = &gdata[bi * cout * ohow..(bi + 1) * cout * ohow];
            let mut cols = vec![T::zero(); ohow * ckk];
            im2col(&xdata[bi * cin * h * wd..(bi + 1) * cin * h * wd], cin, h, wd, k, *spec, &mut cols);
            let dw = if need_w {
                Some(gemm_nn(gi, &cols, cout, ohow, ckk))
            } else {
                None
            };
            let db = if need_b {
                Some(
                    (0..cout)
                        .map(|co| {
                            gi[co * ohow..(co + 1) * ohow]
                                .iter()
                                .fold(T::zero(), |a, &v| a + v)
                        })
                        .collect(),
                )
            } else {
                None
            };
            let dx = if need_x {
                let dcols = gemm_tn(gi, wdata, cout, ohow, ckk);
                let mut dxi = vec![T::zero(); cin * h * wd];
                col2im_add(&dcols, cin, h, wd, k, *spec, &mut dxi);
                Some(dxi)
            } else {
                None
            };
            PerImage { dx, dw, db }
        })
        .collect();

    if need_x {
        let mut dx = Tensor::zeros(vec![batch, cin, h, wd]);
        for (bi, pi) in per_image.iter().enumerate() {
            dx.data_mut()[bi * cin * h * wd..(bi + 1) * cin * h * wd]
                .copy_from_slice(pi.dx.as_ref().expect("dx requested"));
        }
        tape.accumulate(grads, x, dx);
    }
    if need_w {
        let mut dw = Tensor::zeros(wv.shape().to_vec());
        for pi in &per_image {
            for (acc, &v) in dw.data_mut().iter_mut().zip(pi.dw.as_ref().expect("dw")) {
                *acc = *acc + v;
            }
        }
        tape.accumulate(grads, w, dw);
    }
    if need_b {
        let mut db = Tensor::zeros(vec![cout]);
        for pi in &per_image {
            for (acc, &v) in db.data_mut().iter_mut().zip(pi.db.as_ref().expect("db")) {
                *acc = *acc + v;
            }
        }
        tape.accumulate(grads, b, db);
    }
}

pub(super) fn upsample2x_backward<T: Scalar>(xshape: &[usize], g: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = Tensor::zeros(vec![b, c, h, w]);
    for img in 0..b * c {
        let src = &g.data()[img * oh * ow..(img + 1) * oh * ow];
        let dst = &mut dx.data_mut()[img * h * w..(img + 1) * h * w];
        for y in 0..oh {
            for x_ in 0..ow {
                let t = (y / 2) * w + x_ / 2;
                dst[t] = dst[t] + src[y * ow + x_];
            }
        }
    }
    dx
}

pub(super) fn nchw_to_rows_backward<T: Scalar>(xshape: &[usize], g: &Tensor<T>) -> Tensor<T> {
    let (b, d, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let mut dx = Tensor::zeros(vec![b, d, h, w]);
    for bi in 0..b {
        for di in 0..d {
            for y in 0..h {
                for x_ in 0..w {
                    dx.data_mut()[((bi * d + di) * h + y) * w + x_] =
                        g.data()[(bi * h * w + y * w + x_) * d + di];
                }
            }
        }
    }
    dx
}

pub(super) fn rows_to_nchw_backward<T: Scalar>(
    dims: (usize, usize, usize, usize),
    g: &Tensor<T>,
) -> Tensor<T> {
    let (b, d, h, w) = dims;
    let mut dx = Tensor::zeros(vec![b * h * w, d]);
    for bi in 0..b {
        for di in 0..d {
            for y in 0..h {
                for x_ in 0..w {
                    dx.data_mut()[(bi * h * w + y * w + x_) * d + di] =
                        g.data()[((bi * d + di) * h + y) * w + x_];
                }
            }
        }
    }
    dx
}
