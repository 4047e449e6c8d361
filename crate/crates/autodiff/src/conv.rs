//! Grouped 2-D convolution and its transpose, both lowered to patch-gather
//! (im2col) plus gemm.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::real::{gemm, Layout, Real};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dCfg {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2dCfg {
    pub fn new(stride: usize, pad: usize, groups: usize) -> Self {
        Conv2dCfg { stride, pad, groups }
    }
}

impl Default for Conv2dCfg {
    fn default() -> Self {
        Conv2dCfg { stride: 1, pad: 0, groups: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTranspose2dCfg {
    pub stride: usize,
    pub pad: usize,
    pub output_padding: usize,
    pub groups: usize,
}

impl ConvTranspose2dCfg {
    pub fn new(stride: usize, pad: usize, output_padding: usize, groups: usize) -> Self {
        ConvTranspose2dCfg {
            stride,
            pad,
            output_padding,
            groups,
        }
    }
}

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub fn conv_transpose_out_size(input: usize, kernel: usize, stride: usize, pad: usize, output_padding: usize) -> Option<usize> {
    let full = (input - 1) * stride + kernel + output_padding;
    full.checked_sub(2 * pad).filter(|&n| n > 0)
}

/// Geometry of a (single-group) image and the patch grid sliding over it.
#[derive(Debug, Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<F: Real>(img: &[F], g: &Geom, cols: &mut [F]) {
    let n = g.cols();
    for ci in 0..g.c {
        let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { F::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-adds patch columns back into an image (adjoint of `im2col`).
fn col2im<F: Real>(cols: &[F], g: &Geom, img: &mut [F]) {
    let n = g.cols();
    for ci in 0..g.c {
        let plane = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            line[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

struct ConvDims {
    batch: usize,
    cin: usize,
    cout: usize,
    groups: usize,
    geom: Geom,
}

fn conv_dims<F: Real>(x: &Tensor<F>, w: &Tensor<F>, cfg: Conv2dCfg) -> Result<ConvDims> {
    let op = "conv2d";
    if x.ndim() != 4 || w.ndim() != 4 {
        return Err(Error::shape(
            op,
            format!("expected 4-d input and weight, got {:?} and {:?}", x.shape(), w.shape()),
        ));
    }
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cin_g, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let g = cfg.groups;
    if g == 0 || cin % g != 0 || cout % g != 0 {
        return Err(Error::config(op, format!("channels {cin}->{cout} not divisible by groups {g}")));
    }
    if cin / g != cin_g {
        return Err(Error::shape(op, format!("weight expects {cin_g} channels per group, input gives {}", cin / g)));
    }
    let oh =
        conv_out_size(h, kh, cfg.stride, cfg.pad).ok_or_else(|| Error::config(op, format!("kernel {kh} stride {} does not fit height {h}", cfg.stride)))?;
    let ow =
        conv_out_size(wd, kw, cfg.stride, cfg.pad).ok_or_else(|| Error::config(op, format!("kernel {kw} stride {} does not fit width {wd}", cfg.stride)))?;
    Ok(ConvDims {
        batch: b,
        cin,
        cout,
        groups: g,
        geom: Geom {
            c: cin_g,
            h,
            w: wd,
            kh,
            kw,
            stride: cfg.stride,
            pad: cfg.pad,
            oh,
            ow,
        },
    })
}

pub fn conv2d_output_shape<F: Real>(x: &Tensor<F>, w: &Tensor<F>, cfg: Conv2dCfg) -> Result<Vec<usize>> {
    let d = conv_dims(x, w, cfg)?;
    Ok(vec![d.batch, d.cout, d.geom.oh, d.geom.ow])
}

pub fn conv2d_forward<F: Real>(x: &Tensor<F>, w: &Tensor<F>, cfg: Conv2dCfg) -> Result<Tensor<F>> {
    let d = conv_dims(x, w, cfg)?;
    let g = d.geom;
    let (cout_g, k) = (d.cout / d.groups, g.rows());
    let (in_sample, out_sample) = (d.cin * g.h * g.w, d.cout * g.cols());
    let mut out = vec![F::zero(); d.batch * out_sample];
    let (xd, wd) = (x.data(), w.data());
    out.par_chunks_mut(out_sample).enumerate().for_each(|(b, ob)| {
        let mut cols = vec![F::zero(); k * g.cols()];
        for grp in 0..d.groups {
            let img = &xd[b * in_sample + grp * g.c * g.h * g.w..][..g.c * g.h * g.w];
            im2col(img, &g, &mut cols);
            let wg = &wd[grp * cout_g * k..(grp + 1) * cout_g * k];
            let og = &mut ob[grp * cout_g * g.cols()..(grp + 1) * cout_g * g.cols()];
            gemm(
                cout_g,
                k,
                g.cols(),
                F::one(),
                wg,
                Layout::row_major(k),
                &cols,
                Layout::row_major(g.cols()),
                F::zero(),
                og,
                Layout::row_major(g.cols()),
            );
        }
    });
    Ok(Tensor::from_parts(vec![d.batch, d.cout, g.oh, g.ow], out))
}

/// Returns `(dx, dw)`; each is computed only when requested.
pub fn conv2d_backward<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    gout: &Tensor<F>,
    cfg: Conv2dCfg,
    need_dx: bool,
    need_dw: bool,
) -> Result<(Option<Tensor<F>>, Option<Tensor<F>>)> {
    let d = conv_dims(x, w, cfg)?;
    let g = d.geom;
    let (cout_g, k, n) = (d.cout / d.groups, g.rows(), g.cols());
    let (in_sample, out_sample) = (d.cin * g.h * g.w, d.cout * n);
    let (xd, wd, gd) = (x.data(), w.data(), gout.data());

    let dx = need_dx.then(|| {
        let mut dx = vec![F::zero(); x.len()];
        dx.par_chunks_mut(in_sample).enumerate().for_each(|(b, dxb)| {
            let mut cols = vec![F::zero(); k * n];
            for grp in 0..d.groups {
                let wg = &wd[grp * cout_g * k..(grp + 1) * cout_g * k];
                let gg = &gd[b * out_sample + grp * cout_g * n..][..cout_g * n];
                gemm(
                    k,
                    cout_g,
                    n,
                    F::one(),
                    wg,
                    Layout::transposed(k),
                    gg,
                    Layout::row_major(n),
                    F::zero(),
                    &mut cols,
                    Layout::row_major(n),
                );
                col2im(&cols, &g, &mut dxb[grp * g.c * g.h * g.w..(grp + 1) * g.c * g.h * g.w]);
            }
        });
        Tensor::from_parts(x.shape().to_vec(), dx)
    });

    let dw = need_dw.then(|| {
        let mut dw = vec![F::zero(); w.len()];
        let mut cols = vec![F::zero(); k * n];
        for b in 0..d.batch {
            for grp in 0..d.groups {
                let img = &xd[b * in_sample + grp * g.c * g.h * g.w..][..g.c * g.h * g.w];
                im2col(img, &g, &mut cols);
                let gg = &gd[b * out_sample + grp * cout_g * n..][..cout_g * n];
                let dwg = &mut dw[grp * cout_g * k..(grp + 1) * cout_g * k];
                gemm(
                    cout_g,
                    n,
                    k,
                    F::one(),
                    gg,
                    Layout::row_major(n),
                    &cols,
                    Layout::transposed(n),
                    F::one(),
                    dwg,
                    Layout::row_major(k),
                );
            }
        }
        Tensor::from_parts(w.shape().to_vec(), dw)
    });
    Ok((dx, dw))
}

struct ConvTDims {
    batch: usize,
    cin: usize,
    cout: usize,
    groups: usize,
    /// Geometry of the *output* image; its patch grid matches the input.
    geom: Geom,
}

fn conv_t_dims<F: Real>(x: &Tensor<F>, w: &Tensor<F>, cfg: ConvTranspose2dCfg) -> Result<ConvTDims> {
    let op = "conv_transpose2d";
    if x.ndim() != 4 || w.ndim() != 4 {
        return Err(Error::shape(
            op,
            format!("expected 4-d input and weight, got {:?} and {:?}", x.shape(), w.shape()),
        ));
    }
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (w_in, cout_g, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let g = cfg.groups;
    if g == 0 || cin % g != 0 {
        return Err(Error::config(op, format!("input channels {cin} not divisible by groups {g}")));
    }
    if w_in != cin {
        return Err(Error::shape(op, format!("weight has {w_in} input channels, input has {cin}")));
    }
    if cfg.stride == 0 || (cfg.output_padding > 0 && cfg.output_padding >= cfg.stride) {
        return Err(Error::config(
            op,
            format!("output_padding {} must be below stride {}", cfg.output_padding, cfg.stride),
        ));
    }
    let oh = conv_transpose_out_size(h, kh, cfg.stride, cfg.pad, cfg.output_padding).ok_or_else(|| Error::config(op, "padding swallows the output height"))?;
    let ow = conv_transpose_out_size(wd, kw, cfg.stride, cfg.pad, cfg.output_padding).ok_or_else(|| Error::config(op, "padding swallows the output width"))?;
    Ok(ConvTDims {
        batch: b,
        cin,
        cout: cout_g * g,
        groups: g,
        geom: Geom {
            c: cout_g,
            h: oh,
            w: ow,
            kh,
            kw,
            stride: cfg.stride,
            pad: cfg.pad,
            oh: h,
            ow: wd,
        },
    })
}

pub fn conv_transpose2d_output_shape<F: Real>(x: &Tensor<F>, w: &Tensor<F>, cfg: ConvTranspose2dCfg) -> Result<Vec<usize>> {
    let d = conv_t_dims(x, w, cfg)?;
    Ok(vec![d.batch, d.cout, d.geom.h, d.geom.w])
}

pub fn conv_transpose2d_forward<F: Real>(x: &Tensor<F>, w: &Tensor<F>, cfg: ConvTranspose2dCfg) -> Result<Tensor<F>> {
    let d = conv_t_dims(x, w, cfg)?;
    let g = d.geom;
    let (cin_g, k, n) = (d.cin / d.groups, g.rows(), g.cols());
    let (in_sample, out_sample) = (d.cin * n, d.cout * g.h * g.w);
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![F::zero(); d.batch * out_sample];
    out.par_chunks_mut(out_sample).enumerate().for_each(|(b, ob)| {
        let mut cols = vec![F::zero(); k * n];
        for grp in 0..d.groups {
            let wg = &wd[grp * cin_g * k..(grp + 1) * cin_g * k];
            let xg = &xd[b * in_sample + grp * cin_g * n..][..cin_g * n];
            gemm(
                k,
                cin_g,
                n,
                F::one(),
                wg,
                Layout::transposed(k),
                xg,
                Layout::row_major(n),
                F::zero(),
                &mut cols,
                Layout::row_major(n),
            );
            col2im(&cols, &g, &mut ob[grp * g.c * g.h * g.w..(grp + 1) * g.c * g.h * g.w]);
        }
    });
    Ok(Tensor::from_parts(vec![d.batch, d.cout, g.h, g.w], out))
}

pub fn conv_transpose2d_backward<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    gout: &Tensor<F>,
    cfg: ConvTranspose2dCfg,
    need_dx: bool,
    need_dw: bool,
) -> Result<(Option<Tensor<F>>, Option<Tensor<F>>)> {
    let d = conv_t_dims(x, w, cfg)?;
    let g = d.geom;
    let (cin_g, k, n) = (d.cin / d.groups, g.rows(), g.cols());
    let (in_sample, out_sample) = (d.cin * n, d.cout * g.h * g.w);
    let (xd, wd, gd) = (x.data(), w.data(), gout.data());

    let dx = need_dx.then(|| {
        let mut dx = vec![F::zero(); x.len()];
        dx.par_chunks_mut(in_sample).enumerate().for_each(|(b, dxb)| {
            let mut cols = vec![F::zero(); k * n];
            for grp in 0..d.groups {
                let img = &gd[b * out_sample + grp * g.c * g.h * g.w..][..g.c * g.h * g.w];
                im2col(img, &g, &mut cols);
                let wg = &wd[grp * cin_g * k..(grp + 1) * cin_g * k];
                gemm(
                    cin_g,
                    k,
                    n,
                    F::one(),
                    wg,
                    Layout::row_major(k),
                    &cols,
                    Layout::row_major(n),
                    F::zero(),
                    &mut dxb[grp * cin_g * n..(grp + 1) * cin_g * n],
                    Layout::row_major(n),
                );
            }
        });
        Tensor::from_parts(x.shape().to_vec(), dx)
    });

    let dw = need_dw.then(|| {
        let mut dw = vec![F::zero(); w.len()];
        let mut cols = vec![F::zero(); k * n];
        for b in 0..d.batch {
            for grp in 0..d.groups {
                let img = &gd[b * out_sample + grp * g.c * g.h * g.w..][..g.c * g.h * g.w];
                im2col(img, &g, &mut cols);
                let xg = &xd[b * in_sample + grp * cin_g * n..][..cin_g * n];
                let dwg = &mut dw[grp * cin_g * k..(grp + 1) * cin_g * k];
                gemm(
                    cin_g,
                    n,
                    k,
                    F::one(),
                    xg,
                    Layout::row_major(n),
                    &cols,
                    Layout::transposed(n),
                    F::one(),
                    dwg,
                    Layout::row_major(k),
                );
            }
        }
        Tensor::from_parts(w.shape().to_vec(), dw)
    });
    Ok((dx, dw))
}
