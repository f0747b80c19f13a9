//! Direct 2-d convolution and transpose-convolution kernels with their
//! gradient counterparts.
//!
//! Layout is always [B, C, H, W] row-major. Parallelism is over output
//! planes (or single gradient elements for weight grads); each plane is
//! filled by one task with a fixed loop order, so results do not depend
//! on the thread count.

use crate::element::Element;
use crate::parallel::{for_each_chunk, for_each_elem};

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub c_out: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// out[b,co,oh,ow] = bias[co] + sum x[b,ci,oh*s-p+kh, ow*s-p+kw] * w[co,ci,kh,kw]
pub fn conv2d_fwd<E: Element>(x: &[E], w: &[E], bias: Option<&[E]>, out: &mut [E], g: &ConvGeom) {
    let plane = g.out_h * g.out_w;
    for_each_chunk(out, plane, |plane_idx, o| {
        let b = plane_idx / g.c_out;
        let co = plane_idx % g.c_out;
        let init = bias.map(|bv| bv[co]).unwrap_or(E::ZERO);
        o.fill(init);
        for ci in 0..g.c_in {
            let x_plane = &x[(b * g.c_in + ci) * g.in_h * g.in_w..][..g.in_h * g.in_w];
            for kh in 0..g.k_h {
                for kw in 0..g.k_w {
                    let coeff = w[((co * g.c_in + ci) * g.k_h + kh) * g.k_w + kw];
                    if coeff == E::ZERO {
                        continue;
                    }
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.in_h as isize {
                            continue;
                        }
                        let x_row = &x_plane[ih as usize * g.in_w..][..g.in_w];
                        let o_row = &mut o[oh * g.out_w..][..g.out_w];
                        if g.stride == 1 {
                            // iw = ow + kw - p; restrict ow to keep iw in range
                            let shift = kw as isize - g.pad as isize;
                            let ow_lo = (-shift).max(0) as usize;
                            let ow_hi =
                                (g.in_w as isize - shift).clamp(0, g.out_w as isize) as usize;
                            let src = &x_row[(ow_lo as isize + shift) as usize..]
                                [..ow_hi.saturating_sub(ow_lo)];
                            for (o_v, &x_v) in o_row[ow_lo..ow_hi].iter_mut().zip(src) {
                                *o_v += coeff * x_v;
                            }
                        } else {
                            for ow in 0..g.out_w {
                                let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                                if iw >= 0 && iw < g.in_w as isize {
                                    o_row[ow] += coeff * x_row[iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// dx += conv2d backward wrt input.
pub fn conv2d_bwd_x<E: Element>(gout: &[E], w: &[E], dx: &mut [E], g: &ConvGeom) {
    let plane = g.in_h * g.in_w;
    for_each_chunk(dx, plane, |plane_idx, dxp| {
        let b = plane_idx / g.c_in;
        let ci = plane_idx % g.c_in;
        for co in 0..g.c_out {
            let g_plane = &gout[(b * g.c_out + co) * g.out_h * g.out_w..][..g.out_h * g.out_w];
            for kh in 0..g.k_h {
                for kw in 0..g.k_w {
                    let coeff = w[((co * g.c_in + ci) * g.k_h + kh) * g.k_w + kw];
                    if coeff == E::ZERO {
                        continue;
                    }
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.in_h as isize {
                            continue;
                        }
                        let dx_row = &mut dxp[ih as usize * g.in_w..][..g.in_w];
                        let g_row = &g_plane[oh * g.out_w..][..g.out_w];
                        if g.stride == 1 {
                            let shift = kw as isize - g.pad as isize;
                            let ow_lo = (-shift).max(0) as usize;
                            let ow_hi =
                                (g.in_w as isize - shift).clamp(0, g.out_w as isize) as usize;
                            let dst = &mut dx_row[(ow_lo as isize + shift) as usize..]
                                [..ow_hi.saturating_sub(ow_lo)];
                            for (d_v, &g_v) in dst.iter_mut().zip(&g_row[ow_lo..ow_hi]) {
                                *d_v += coeff * g_v;
                            }
                        } else {
                            for ow in 0..g.out_w {
                                let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                                if iw >= 0 && iw < g.in_w as isize {
                                    dx_row[iw as usize] += coeff * g_row[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// dw += conv2d backward wrt weights; one task per weight element.
pub fn conv2d_bwd_w<E: Element>(gout: &[E], x: &[E], dw: &mut [E], g: &ConvGeom) {
    for_each_elem(dw, |widx, d| {
        let kw = widx % g.k_w;
        let kh = (widx / g.k_w) % g.k_h;
        let ci = (widx / (g.k_w * g.k_h)) % g.c_in;
        let co = widx / (g.k_w * g.k_h * g.c_in);
        let mut acc = E::ZERO;
        for b in 0..g.batch {
            let g_plane = &gout[(b * g.c_out + co) * g.out_h * g.out_w..][..g.out_h * g.out_w];
            let x_plane = &x[(b * g.c_in + ci) * g.in_h * g.in_w..][..g.in_h * g.in_w];
            for oh in 0..g.out_h {
                let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                if ih < 0 || ih >= g.in_h as isize {
                    continue;
                }
                let x_row = &x_plane[ih as usize * g.in_w..][..g.in_w];
                let g_row = &g_plane[oh * g.out_w..][..g.out_w];
                if g.stride == 1 {
                    let shift = kw as isize - g.pad as isize;
                    let ow_lo = (-shift).max(0) as usize;
                    let ow_hi = (g.in_w as isize - shift).clamp(0, g.out_w as isize) as usize;
                    let src =
                        &x_row[(ow_lo as isize + shift) as usize..][..ow_hi.saturating_sub(ow_lo)];
                    for (&g_v, &x_v) in g_row[ow_lo..ow_hi].iter().zip(src) {
                        acc += g_v * x_v;
                    }
                } else {
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.in_w as isize {
                            acc += g_row[ow] * x_row[iw as usize];
                        }
                    }
                }
            }
        }
        *d += acc;
    });
}

/// db[co] += sum of gout over batch and space.
pub fn conv2d_bwd_b<E: Element>(gout: &[E], db: &mut [E], g: &ConvGeom) {
    for_each_elem(db, |co, d| {
        let mut acc = E::ZERO;
        for b in 0..g.batch {
            let g_plane = &gout[(b * g.c_out + co) * g.out_h * g.out_w..][..g.out_h * g.out_w];
            for &v in g_plane {
                acc += v;
            }
        }
        *d += acc;
    });
}

/// Transpose convolution. Weight layout [Ci, Co, KH, KW];
/// out_h = (in_h - 1) * stride - 2 * pad + k_h. `geom` fields `c_in`/`in_*`
/// describe the input, `c_out`/`out_*` the output.
pub fn conv_transpose2d_fwd<E: Element>(
    x: &[E],
    w: &[E],
    bias: Option<&[E]>,
    out: &mut [E],
    g: &ConvGeom,
) {
    let plane = g.out_h * g.out_w;
    for_each_chunk(out, plane, |plane_idx, o| {
        let b = plane_idx / g.c_out;
        let co = plane_idx % g.c_out;
        let init = bias.map(|bv| bv[co]).unwrap_or(E::ZERO);
        o.fill(init);
        for ci in 0..g.c_in {
            let x_plane = &x[(b * g.c_in + ci) * g.in_h * g.in_w..][..g.in_h * g.in_w];
            for kh in 0..g.k_h {
                for kw in 0..g.k_w {
                    let coeff = w[((ci * g.c_out + co) * g.k_h + kh) * g.k_w + kw];
                    if coeff == E::ZERO {
                        continue;
                    }
                    for ih in 0..g.in_h {
                        let oh = (ih * g.stride + kh) as isize - g.pad as isize;
                        if oh < 0 || oh >= g.out_h as isize {
                            continue;
                        }
                        let x_row = &x_plane[ih * g.in_w..][..g.in_w];
                        let o_row = &mut o[oh as usize * g.out_w..][..g.out_w];
                        for iw in 0..g.in_w {
                            let ow = (iw * g.stride + kw) as isize - g.pad as isize;
                            if ow >= 0 && ow < g.out_w as isize {
                                o_row[ow as usize] += coeff * x_row[iw];
                            }
                        }
                    }
                }
            }
        }
    });
}

pub fn conv_transpose2d_bwd_x<E: Element>(gout: &[E], w: &[E], dx: &mut [E], g: &ConvGeom) {
    let plane = g.in_h * g.in_w;
    for_each_chunk(dx, plane, |plane_idx, dxp| {
        let b = plane_idx / g.c_in;
        let ci = plane_idx % g.c_in;
        for co in 0..g.c_out {
            let g_plane = &gout[(b * g.c_out + co) * g.out_h * g.out_w..][..g.out_h * g.out_w];
            for kh in 0..g.k_h {
                for kw in 0..g.k_w {
                    let coeff = w[((ci * g.c_out + co) * g.k_h + kh) * g.k_w + kw];
                    if coeff == E::ZERO {
                        continue;
                    }
                    for ih in 0..g.in_h {
                        let oh = (ih * g.stride + kh) as isize - g.pad as isize;
                        if oh < 0 || oh >= g.out_h as isize {
                            continue;
                        }
                        let g_row = &g_plane[oh as usize * g.out_w..][..g.out_w];
                        let dx_row = &mut dxp[ih * g.in_w..][..g.in_w];
                        for iw in 0..g.in_w {
                            let ow = (iw * g.stride + kw) as isize - g.pad as isize;
                            if ow >= 0 && ow < g.out_w as isize {
                                dx_row[iw] += coeff * g_row[ow as usize];
                            }
                        }
                    }
                }
            }
        }
    });
}

pub fn conv_transpose2d_bwd_w<E: Element>(gout: &[E], x: &[E], dw: &mut [E], g: &ConvGeom) {
    for_each_elem(dw, |widx, d| {
        let kw = widx % g.k_w;
        let kh = (widx / g.k_w) % g.k_h;
        let co = (widx / (g.k_w * g.k_h)) % g.c_out;
        let ci = widx / (g.k_w * g.k_h * g.c_out);
        let mut acc = E::ZERO;
        for b in 0..g.batch {
            let x_plane = &x[(b * g.c_in + ci) * g.in_h * g.in_w..][..g.in_h * g.in_w];
            let g_plane = &gout[(b * g.c_out + co) * g.out_h * g.out_w..][..g.out_h * g.out_w];
            for ih in 0..g.in_h {
                let oh = (ih * g.stride + kh) as isize - g.pad as isize;
                if oh < 0 || oh >= g.out_h as isize {
                    continue;
                }
                let x_row = &x_plane[ih * g.in_w..][..g.in_w];
                let g_row = &g_plane[oh as usize * g.out_w..][..g.out_w];
                for iw in 0..g.in_w {
                    let ow = (iw * g.stride + kw) as isize - g.pad as isize;
                    if ow >= 0 && ow < g.out_w as isize {
                        acc += x_row[iw] * g_row[ow as usize];
                    }
                }
            }
        }
        *d += acc;
    });
}
