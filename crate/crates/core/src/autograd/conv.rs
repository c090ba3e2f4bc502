//! Minimal stride-2 convolution kernels for the tiny-image observation path.
//!
//! Fixed 3x3 kernels, stride 2, padding 1: a conv halves the spatial extent
//! (16 -> 8 -> 4 -> 2) and the transposed conv doubles it. Layouts are
//! row-major NCHW for activations and [c_out, c_in, 3, 3] for kernels
//! ([c_in, c_out, 3, 3] for the transposed direction).

use super::{Record, Tensor};

const K: usize = 3;
const STRIDE: usize = 2;
const PAD: isize = 1;

#[derive(Debug, Clone, Copy)]
pub(super) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
}

impl ConvDims {
    fn out_hw(&self) -> (usize, usize) {
        (self.h / STRIDE, self.w / STRIDE)
    }

    fn t_out_hw(&self) -> (usize, usize) {
        (self.h * STRIDE, self.w * STRIDE)
    }
}

fn conv2d_forward(d: &ConvDims, x: &[f64], k: &[f64]) -> Vec<f64> {
    let (oh, ow) = d.out_hw();
    let mut out = vec![0.0; d.batch * d.c_out * oh * ow];
    for b in 0..d.batch {
        for co in 0..d.c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..d.c_in {
                        for ky in 0..K {
                            for kx in 0..K {
                                let iy = (oy * STRIDE + ky) as isize - PAD;
                                let ix = (ox * STRIDE + kx) as isize - PAD;
                                if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                    continue;
                                }
                                let xi = ((b * d.c_in + ci) * d.h + iy as usize) * d.w + ix as usize;
                                let ki = ((co * d.c_in + ci) * K + ky) * K + kx;
                                acc += x[xi] * k[ki];
                            }
                        }
                    }
                    out[((b * d.c_out + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

pub(super) fn conv2d_backward(
    d: &ConvDims,
    x: &[f64],
    k: &[f64],
    d_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (oh, ow) = d.out_hw();
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; k.len()];
    for b in 0..d.batch {
        for co in 0..d.c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = d_out[((b * d.c_out + co) * oh + oy) * ow + ox];
                    for ci in 0..d.c_in {
                        for ky in 0..K {
                            for kx in 0..K {
                                let iy = (oy * STRIDE + ky) as isize - PAD;
                                let ix = (ox * STRIDE + kx) as isize - PAD;
                                if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                    continue;
                                }
                                let xi = ((b * d.c_in + ci) * d.h + iy as usize) * d.w + ix as usize;
                                let ki = ((co * d.c_in + ci) * K + ky) * K + kx;
                                dx[xi] += g * k[ki];
                                dk[ki] += g * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}

/// Output position for transposed conv: oy = iy*2 + ky - 1, with an implicit
/// output padding of 1 so the extent exactly doubles.
fn conv_transpose2d_forward(d: &ConvDims, x: &[f64], k: &[f64]) -> Vec<f64> {
    let (oh, ow) = d.t_out_hw();
    let mut out = vec![0.0; d.batch * d.c_out * oh * ow];
    for b in 0..d.batch {
        for ci in 0..d.c_in {
            for iy in 0..d.h {
                for ix in 0..d.w {
                    let v = x[((b * d.c_in + ci) * d.h + iy) * d.w + ix];
                    for co in 0..d.c_out {
                        for ky in 0..K {
                            for kx in 0..K {
                                let oy = (iy * STRIDE + ky) as isize - PAD;
                                let ox = (ix * STRIDE + kx) as isize - PAD;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                let ki = ((ci * d.c_out + co) * K + ky) * K + kx;
                                out[((b * d.c_out + co) * oh + oy as usize) * ow + ox as usize] +=
                                    v * k[ki];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(super) fn conv_transpose2d_backward(
    d: &ConvDims,
    x: &[f64],
    k: &[f64],
    d_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (oh, ow) = d.t_out_hw();
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; k.len()];
    for b in 0..d.batch {
        for ci in 0..d.c_in {
            for iy in 0..d.h {
                for ix in 0..d.w {
                    let xi = ((b * d.c_in + ci) * d.h + iy) * d.w + ix;
                    for co in 0..d.c_out {
                        for ky in 0..K {
                            for kx in 0..K {
                                let oy = (iy * STRIDE + ky) as isize - PAD;
                                let ox = (ix * STRIDE + kx) as isize - PAD;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                let ki = ((ci * d.c_out + co) * K + ky) * K + kx;
                                let g = d_out
                                    [((b * d.c_out + co) * oh + oy as usize) * ow + ox as usize];
                                dx[xi] += g * k[ki];
                                dk[ki] += g * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}

impl Tensor {
    /// 3x3 stride-2 convolution with padding 1. Input [b, c_in, h, w], kernel
    /// [c_out, c_in, 3, 3], output [b, c_out, h/2, w/2].
    pub fn conv2d_s2(&self, kernel: &Tensor) -> Tensor {
        let xs = self.shape();
        let ks = kernel.shape();
        assert!(
            xs.len() == 4 && ks.len() == 4 && ks[1] == xs[1] && ks[2] == K && ks[3] == K,
            "conv2d_s2: incompatible shapes {xs:?} and {ks:?}"
        );
        assert!(xs[2] % 2 == 0 && xs[3] % 2 == 0, "conv2d_s2: spatial extents must be even");
        let dims = ConvDims { batch: xs[0], c_in: xs[1], h: xs[2], w: xs[3], c_out: ks[0] };
        let data = conv2d_forward(&dims, &self.value(), &kernel.value());
        let (oh, ow) = dims.out_hw();
        let rg = self.requires_grad() || kernel.requires_grad();
        self.tape().push(
            vec![dims.batch, dims.c_out, oh, ow],
            data,
            rg,
            Record::Conv2dS2 { x: self.id(), kernel: kernel.id(), dims },
        )
    }

    /// 3x3 stride-2 transposed convolution. Input [b, c_in, h, w], kernel
    /// [c_in, c_out, 3, 3], output [b, c_out, 2h, 2w].
    pub fn conv_transpose2d_s2(&self, kernel: &Tensor) -> Tensor {
        let xs = self.shape();
        let ks = kernel.shape();
        assert!(
            xs.len() == 4 && ks.len() == 4 && ks[0] == xs[1] && ks[2] == K && ks[3] == K,
            "conv_transpose2d_s2: incompatible shapes {xs:?} and {ks:?}"
        );
        let dims = ConvDims { batch: xs[0], c_in: xs[1], h: xs[2], w: xs[3], c_out: ks[1] };
        let data = conv_transpose2d_forward(&dims, &self.value(), &kernel.value());
        let (oh, ow) = dims.t_out_hw();
        let rg = self.requires_grad() || kernel.requires_grad();
        self.tape().push(
            vec![dims.batch, dims.c_out, oh, ow],
            data,
            rg,
            Record::ConvT2dS2 { x: self.id(), kernel: kernel.id(), dims },
        )
    }
}
