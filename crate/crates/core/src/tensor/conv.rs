//! Direct 2-D cross-correlation kernels used by [`super::Tape::conv2d`].

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn in_plane(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.c_out * self.out_h * self.out_w
    }

    /// Output columns `ow` for which `ow * stride + kx - pad` lands inside `[0, w)`.
    fn valid_range(&self, kx: usize, out_len: usize, in_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kx as isize - self.pad as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= in_len - 1
        let hi_num = in_len as isize - 1 - off;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = (hi_num / s + 1).min(out_len as isize);
        if lo >= hi {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }
}

fn forward_one(g: &ConvGeom, input: &[f64], kernel: &[f64], out: &mut [f64]) {
    let (k, s, p) = (g.k, g.stride, g.pad);
    for oc in 0..g.c_out {
        let out_c = &mut out[oc * g.out_h * g.out_w..(oc + 1) * g.out_h * g.out_w];
        for ic in 0..g.c_in {
            let in_c = &input[ic * g.h * g.w..(ic + 1) * g.h * g.w];
            for ky in 0..k {
                let (oy0, oy1) = g.valid_range(ky, g.out_h, g.h);
                for kx in 0..k {
                    let wv = kernel[((oc * g.c_in + ic) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = g.valid_range(kx, g.out_w, g.w);
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - p;
                        let in_row = &in_c[iy * g.w..(iy + 1) * g.w];
                        let out_row = &mut out_c[oy * g.out_w..(oy + 1) * g.out_w];
                        for ox in ox0..ox1 {
                            out_row[ox] += wv * in_row[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(g: &ConvGeom, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.out_plane()];
    let ip = g.in_plane();
    let op = g.out_plane();
    #[cfg(feature = "parallel")]
    out.par_chunks_mut(op)
        .enumerate()
        .for_each(|(b, o)| forward_one(g, &input[b * ip..(b + 1) * ip], kernel, o));
    #[cfg(not(feature = "parallel"))]
    out.chunks_mut(op)
        .enumerate()
        .for_each(|(b, o)| forward_one(g, &input[b * ip..(b + 1) * ip], kernel, o));
    out
}

fn grad_input_one(g: &ConvGeom, grad_out: &[f64], kernel: &[f64], gin: &mut [f64]) {
    let (k, s, p) = (g.k, g.stride, g.pad);
    for oc in 0..g.c_out {
        let go_c = &grad_out[oc * g.out_h * g.out_w..(oc + 1) * g.out_h * g.out_w];
        for ic in 0..g.c_in {
            let gi_c = &mut gin[ic * g.h * g.w..(ic + 1) * g.h * g.w];
            for ky in 0..k {
                let (oy0, oy1) = g.valid_range(ky, g.out_h, g.h);
                for kx in 0..k {
                    let wv = kernel[((oc * g.c_in + ic) * k + ky) * k + kx];
                    let (ox0, ox1) = g.valid_range(kx, g.out_w, g.w);
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - p;
                        let go_row = &go_c[oy * g.out_w..(oy + 1) * g.out_w];
                        let gi_row = &mut gi_c[iy * g.w..(iy + 1) * g.w];
                        for ox in ox0..ox1 {
                            gi_row[ox * s + kx - p] += wv * go_row[ox];
                        }
                    }
                }
            }
        }
    }
}

fn grad_kernel_one(g: &ConvGeom, grad_out: &[f64], input: &[f64], gk: &mut [f64]) {
    let (k, s, p) = (g.k, g.stride, g.pad);
    for oc in 0..g.c_out {
        let go_c = &grad_out[oc * g.out_h * g.out_w..(oc + 1) * g.out_h * g.out_w];
        for ic in 0..g.c_in {
            let in_c = &input[ic * g.h * g.w..(ic + 1) * g.h * g.w];
            for ky in 0..k {
                let (oy0, oy1) = g.valid_range(ky, g.out_h, g.h);
                for kx in 0..k {
                    let (ox0, ox1) = g.valid_range(kx, g.out_w, g.w);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - p;
                        let go_row = &go_c[oy * g.out_w..(oy + 1) * g.out_w];
                        let in_row = &in_c[iy * g.w..(iy + 1) * g.w];
                        for ox in ox0..ox1 {
                            acc += go_row[ox] * in_row[ox * s + kx - p];
                        }
                    }
                    gk[((oc * g.c_in + ic) * k + ky) * k + kx] += acc;
                }
            }
        }
    }
}

/// Gradient wrt the input batch.
pub(crate) fn backward_input(g: &ConvGeom, grad_out: &[f64], kernel: &[f64]) -> Vec<f64> {
    let mut gin = vec![0.0; g.batch * g.in_plane()];
    let ip = g.in_plane();
    let op = g.out_plane();
    #[cfg(feature = "parallel")]
    gin.par_chunks_mut(ip)
        .enumerate()
        .for_each(|(b, gi)| grad_input_one(g, &grad_out[b * op..(b + 1) * op], kernel, gi));
    #[cfg(not(feature = "parallel"))]
    gin.chunks_mut(ip)
        .enumerate()
        .for_each(|(b, gi)| grad_input_one(g, &grad_out[b * op..(b + 1) * op], kernel, gi));
    gin
}

/// Gradient wrt the kernel. Per-sample partials are reduced in batch order so
/// the result does not depend on thread scheduling.
pub(crate) fn backward_kernel(g: &ConvGeom, grad_out: &[f64], input: &[f64]) -> Vec<f64> {
    let klen = g.c_out * g.c_in * g.k * g.k;
    let ip = g.in_plane();
    let op = g.out_plane();
    let mut partials = vec![0.0; g.batch * klen];
    #[cfg(feature = "parallel")]
    partials.par_chunks_mut(klen).enumerate().for_each(|(b, gk)| {
        grad_kernel_one(
            g,
            &grad_out[b * op..(b + 1) * op],
            &input[b * ip..(b + 1) * ip],
            gk,
        )
    });
    #[cfg(not(feature = "parallel"))]
    partials.chunks_mut(klen).enumerate().for_each(|(b, gk)| {
        grad_kernel_one(
            g,
            &grad_out[b * op..(b + 1) * op],
            &input[b * ip..(b + 1) * ip],
            gk,
        )
    });
    let mut gk = vec![0.0; klen];
    for part in partials.chunks(klen) {
        for (acc, v) in gk.iter_mut().zip(part) {
            *acc += v;
        }
    }
    gk
}
