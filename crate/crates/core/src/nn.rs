//! Convolution, transposed convolution and space-to-depth patching.
//!
//! Image tensors are `C×H×W` or batched `N×C×H×W`; outputs keep the rank
//! of the input. Convolution is cross-correlation (no kernel flip).

use crate::error::{Error, Result};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tape::{GradSink, Var};
use crate::tensor::Tensor;

/// Spatial geometry of a convolution from a `c×h×w` image to `ho×wo`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        if hp < kh || wp < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}×{kw} larger than padded input {hp}×{wp}"),
            ));
        }
        Ok(ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (hp - kh) / stride + 1,
            wo: (wp - kw) / stride + 1,
        })
    }

    pub fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// `img` (c×h×w) → `cols` (k × ho·wo).
    pub fn im2col<S: Scalar>(&self, img: &[S], cols: &mut [S]) {
        let p = self.p();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(S::zero());
                            continue;
                        }
                        let src = &img[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                S::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: accumulates `cols` into `img`.
    pub fn col2im<S: Scalar>(&self, cols: &[S], img: &mut [S]) {
        let p = self.p();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut img[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Splits an image shape into `(n, c, h, w, batched)`.
pub(crate) fn image_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w, false)),
        [n, c, h, w] => Ok((n, c, h, w, true)),
        _ => Err(Error::shape(op, format!("expected C×H×W or N×C×H×W, got {shape:?}"))),
    }
}

fn image_shape(n: usize, c: usize, h: usize, w: usize, batched: bool) -> Vec<usize> {
    if batched {
        vec![n, c, h, w]
    } else {
        vec![c, h, w]
    }
}

fn check_bias<S: Scalar>(op: &'static str, bias: Option<&Var<'_, S>>, cout: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op,
                lhs: vec![cout],
                rhs: b.shape(),
            });
        }
    }
    Ok(())
}

fn bias_grad<S: Scalar>(g: &[S], n: usize, cout: usize, p: usize, slot: &mut [S]) {
    for s in 0..n {
        for c in 0..cout {
            let base = (s * cout + c) * p;
            slot[c] += g[base..base + p].iter().copied().sum::<S>();
        }
    }
}

/// 2-D cross-correlation. `weight` is `Cout×Cin×kh×kw`, `bias` is `Cout`.
pub fn conv2d<'t, S: Scalar>(
    x: Var<'t, S>,
    weight: Var<'t, S>,
    bias: Option<Var<'t, S>>,
    stride: usize,
    pad: usize,
) -> Result<Var<'t, S>> {
    let xv = x.value();
    let wv = weight.value();
    let (n, cin, h, w, batched) = image_dims("conv2d", xv.shape())?;
    let &[cout, wcin, kh, kw] = wv.shape() else {
        return Err(Error::shape("conv2d", format!("weight shape {:?}", wv.shape())));
    };
    if wcin != cin {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: xv.shape().to_vec(),
            rhs: wv.shape().to_vec(),
        });
    }
    check_bias("conv2d bias", bias.as_ref(), cout)?;
    let geom = ConvGeom::new(cin, h, w, kh, kw, stride, pad)?;
    let (k, p) = (geom.k(), geom.p());

    let cols: Option<Vec<S>> = (!geom.is_pointwise()).then(|| {
        let mut cols = vec![S::zero(); n * k * p];
        for s in 0..n {
            geom.im2col(&xv.data()[s * cin * h * w..(s + 1) * cin * h * w], &mut cols[s * k * p..(s + 1) * k * p]);
        }
        cols
    });
    let col_block = |s: usize| -> &[S] {
        match &cols {
            Some(c) => &c[s * k * p..(s + 1) * k * p],
            None => &xv.data()[s * k * p..(s + 1) * k * p],
        }
    };

    let mut out = vec![S::zero(); n * cout * p];
    let bv = bias.map(|b| b.value());
    for s in 0..n {
        let dst = &mut out[s * cout * p..(s + 1) * cout * p];
        if let Some(b) = &bv {
            for c in 0..cout {
                dst[c * p..(c + 1) * p].fill(b.data()[c]);
            }
        }
        let beta = if bv.is_some() { S::one() } else { S::zero() };
        gemm(MatRef::rm(wv.data(), cout, k), MatRef::rm(col_block(s), k, p), dst, beta);
    }
    let value = Tensor::new(image_shape(n, cout, geom.ho, geom.wo, batched), out)?;

    let (xid, wid, bid) = (x.id(), weight.id(), bias.map(|b| b.id()));
    let mut inputs = vec![xid, wid];
    inputs.extend(bid);
    let xv_bw = xv.clone();
    let backward = Box::new(move |g: &[S], sink: &mut GradSink<'_, S>| {
        if let Some(bid) = bid {
            if let Some(slot) = sink.slot(bid) {
                bias_grad(g, n, cout, p, slot);
            }
        }
        let col_block = |s: usize| -> &[S] {
            match &cols {
                Some(c) => &c[s * k * p..(s + 1) * k * p],
                None => &xv_bw.data()[s * k * p..(s + 1) * k * p],
            }
        };
        if let Some(slot) = sink.slot(wid) {
            for s in 0..n {
                let gs = &g[s * cout * p..(s + 1) * cout * p];
                gemm(MatRef::rm(gs, cout, p), MatRef::rm(col_block(s), k, p).t(), slot, S::one());
            }
        }
        if sink.wants(xid) {
            let img = cin * h * w;
            let mut dx = vec![S::zero(); n * img];
            let mut dcols = vec![S::zero(); k * p];
            for s in 0..n {
                let gs = &g[s * cout * p..(s + 1) * cout * p];
                if geom.is_pointwise() {
                    gemm(MatRef::rm(wv.data(), cout, k).t(), MatRef::rm(gs, cout, p), &mut dx[s * img..(s + 1) * img], S::zero());
                } else {
                    gemm(MatRef::rm(wv.data(), cout, k).t(), MatRef::rm(gs, cout, p), &mut dcols, S::zero());
                    geom.col2im(&dcols, &mut dx[s * img..(s + 1) * img]);
                }
            }
            sink.add(xid, &dx);
        }
    });
    Ok(x.record("conv2d", value, &inputs, backward))
}

/// Transposed convolution, the adjoint of [`conv2d`] with respect to its
/// input. `weight` is `Cin×Cout×kh×kw`; output size is
/// `(H−1)·stride − 2·pad + kh`.
pub fn conv_transpose2d<'t, S: Scalar>(
    x: Var<'t, S>,
    weight: Var<'t, S>,
    bias: Option<Var<'t, S>>,
    stride: usize,
    pad: usize,
) -> Result<Var<'t, S>> {
    let xv = x.value();
    let wv = weight.value();
    let (n, cin, h, w, batched) = image_dims("conv_transpose2d", xv.shape())?;
    let &[wcin, cout, kh, kw] = wv.shape() else {
        return Err(Error::shape("conv_transpose2d", format!("weight shape {:?}", wv.shape())));
    };
    if wcin != cin {
        return Err(Error::ShapeMismatch {
            op: "conv_transpose2d",
            lhs: xv.shape().to_vec(),
            rhs: wv.shape().to_vec(),
        });
    }
    check_bias("conv_transpose2d bias", bias.as_ref(), cout)?;
    if stride == 0 {
        return Err(Error::shape("conv_transpose2d", "stride must be positive"));
    }
    let full = (h.max(1) - 1) * stride + kh;
    if h == 0 || w == 0 || full <= 2 * pad || (w - 1) * stride + kw <= 2 * pad {
        return Err(Error::shape("conv_transpose2d", "non-positive output size"));
    }
    let ho = full - 2 * pad;
    let wo = (w - 1) * stride + kw - 2 * pad;
    // The conv mapping the output image back onto the input grid.
    let geom = ConvGeom::new(cout, ho, wo, kh, kw, stride, pad)?;
    debug_assert_eq!((geom.ho, geom.wo), (h, w));
    let (k, p) = (geom.k(), h * w);
    let out_img = cout * ho * wo;

    let mut out = vec![S::zero(); n * out_img];
    let mut cols = vec![S::zero(); k * p];
    for s in 0..n {
        gemm(
            MatRef::rm(wv.data(), cin, k).t(),
            MatRef::rm(&xv.data()[s * cin * p..(s + 1) * cin * p], cin, p),
            &mut cols,
            S::zero(),
        );
        let dst = &mut out[s * out_img..(s + 1) * out_img];
        geom.col2im(&cols, dst);
        if let Some(b) = &bias {
            let b = b.value();
            for c in 0..cout {
                for v in &mut dst[c * ho * wo..(c + 1) * ho * wo] {
                    *v += b.data()[c];
                }
            }
        }
    }
    let value = Tensor::new(image_shape(n, cout, ho, wo, batched), out)?;

    let (xid, wid, bid) = (x.id(), weight.id(), bias.map(|b| b.id()));
    let mut inputs = vec![xid, wid];
    inputs.extend(bid);
    let backward = Box::new(move |g: &[S], sink: &mut GradSink<'_, S>| {
        if let Some(bid) = bid {
            if let Some(slot) = sink.slot(bid) {
                bias_grad(g, n, cout, ho * wo, slot);
            }
        }
        let want_w = sink.wants(wid);
        let want_x = sink.wants(xid);
        if !want_w && !want_x {
            return;
        }
        let mut gcols = vec![S::zero(); k * p];
        let mut dx = vec![S::zero(); if want_x { n * cin * p } else { 0 }];
        for s in 0..n {
            geom.im2col(&g[s * out_img..(s + 1) * out_img], &mut gcols);
            if want_x {
                gemm(
                    MatRef::rm(wv.data(), cin, k),
                    MatRef::rm(&gcols, k, p),
                    &mut dx[s * cin * p..(s + 1) * cin * p],
                    S::zero(),
                );
            }
            if let Some(slot) = sink.slot(wid) {
                gemm(
                    MatRef::rm(&xv.data()[s * cin * p..(s + 1) * cin * p], cin, p),
                    MatRef::rm(&gcols, k, p).t(),
                    slot,
                    S::one(),
                );
            }
        }
        if want_x {
            sink.add(xid, &dx);
        }
    });
    Ok(x.record("conv_transpose2d", value, &inputs, backward))
}

/// Moves each `patch×patch` spatial block into `patch²` channels.
/// Output channel `c·patch² + dy·patch + dx` holds pixel `(dy, dx)` of the
/// block from input channel `c`.
pub fn space_to_depth<'t, S: Scalar>(x: Var<'t, S>, patch: usize) -> Result<Var<'t, S>> {
    let (n, c, h, w, batched) = image_dims("space_to_depth", &x.shape())?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(
            "space_to_depth",
            format!("patch {patch} does not divide {h}×{w}"),
        ));
    }
    let (hp, wp) = (h / patch, w / patch);
    let y = x
        .reshape([n, c, hp, patch, wp, patch])?
        .permute(&[0, 1, 3, 5, 2, 4])?;
    y.reshape(image_shape(n, c * patch * patch, hp, wp, batched))
}

/// Exact inverse of [`space_to_depth`].
pub fn depth_to_space<'t, S: Scalar>(x: Var<'t, S>, patch: usize) -> Result<Var<'t, S>> {
    let (n, cp, h, w, batched) = image_dims("depth_to_space", &x.shape())?;
    if patch == 0 || cp % (patch * patch) != 0 {
        return Err(Error::shape(
            "depth_to_space",
            format!("patch {patch}² does not divide {cp} channels"),
        ));
    }
    let c = cp / (patch * patch);
    let y = x
        .reshape([n, c, patch, patch, h, w])?
        .permute(&[0, 1, 4, 2, 5, 3])?;
    y.reshape(image_shape(n, c, h * patch, w * patch, batched))
}
