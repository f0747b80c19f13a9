//! Bilinear gather (for offset-deformed sampling) and bilinear resize.

use crate::element::Element;
use crate::parallel::for_each_chunk;

/// Resolved interpolation state for one sample point.
#[derive(Clone, Copy)]
pub struct SamplePoint<E> {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
    pub fr: E,
    pub fc: E,
    /// False when the raw coordinate fell outside the map and was clamped;
    /// the value is then constant in that coordinate and its grad is zero.
    pub dr_live: bool,
    pub dc_live: bool,
}

/// Clamp a raw coordinate to the valid border and split it into integer
/// base plus fraction. `n` is the extent along that axis. The coordinate
/// gradient stays live on the closed interval [0, n-1] (one-sided at the
/// ends) and dies only where the clamp actually saturates.
#[inline]
fn resolve_axis<E: Element>(raw: E, n: usize) -> (usize, usize, E, bool) {
    let hi = E::from_f64((n - 1) as f64);
    let live = raw >= E::ZERO && raw <= hi;
    let v = raw.maximum(E::ZERO).minimum(hi);
    let mut i0 = v.floor().to_f64() as usize;
    if i0 >= n - 1 {
        i0 = n - 1;
    }
    let i1 = (i0 + 1).min(n - 1);
    let f = v - E::from_f64(i0 as f64);
    (i0, i1, f, live)
}

pub fn resolve_point<E: Element>(raw_r: E, raw_c: E, h: usize, w: usize) -> SamplePoint<E> {
    let (r0, r1, fr, dr_live) = resolve_axis(raw_r, h);
    let (c0, c1, fc, dc_live) = resolve_axis(raw_c, w);
    SamplePoint {
        r0,
        r1,
        c0,
        c1,
        fr,
        fc,
        dr_live,
        dc_live,
    }
}

#[inline(always)]
fn blend<E: Element>(p: &SamplePoint<E>, plane: &[E], w: usize) -> E {
    let one = E::ONE;
    let v00 = plane[p.r0 * w + p.c0];
    let v01 = plane[p.r0 * w + p.c1];
    let v10 = plane[p.r1 * w + p.c0];
    let v11 = plane[p.r1 * w + p.c1];
    (one - p.fr) * ((one - p.fc) * v00 + p.fc * v01) + p.fr * ((one - p.fc) * v10 + p.fc * v11)
}

/// Gather `x[B,C,H,W]` at fractional coordinates.
///
/// `coords` is [B*G, 2, Ho, Wo]: channel 0 holds the row coordinate and
/// channel 1 the column coordinate; group g of batch b reads from x[b].
/// Output is [B*G, C, Ho, Wo].
pub fn bilinear_fwd<E: Element>(
    x: &[E],
    coords: &[E],
    out: &mut [E],
    batch: usize,
    groups: usize,
    channels: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) {
    debug_assert_eq!(x.len(), batch * channels * h * w);
    let pts = out_h * out_w;
    let plane = channels * pts;
    for_each_chunk(out, plane, |n, o| {
        let b = n / groups;
        let c_base = &coords[n * 2 * pts..][..2 * pts];
        let infos: Vec<SamplePoint<E>> = (0..pts)
            .map(|i| resolve_point(c_base[i], c_base[pts + i], h, w))
            .collect();
        for c in 0..channels {
            let x_plane = &x[(b * channels + c) * h * w..][..h * w];
            let o_plane = &mut o[c * pts..][..pts];
            for (ov, p) in o_plane.iter_mut().zip(&infos) {
                *ov = blend(p, x_plane, w);
            }
        }
    });
}

/// Accumulate gradient wrt the sampled map.
pub fn bilinear_bwd_x<E: Element>(
    gout: &[E],
    coords: &[E],
    dx: &mut [E],
    batch: usize,
    groups: usize,
    channels: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) {
    let pts = out_h * out_w;
    // Precompute sample points once; shared read-only by all (b, c) tasks.
    let infos: Vec<SamplePoint<E>> = (0..batch * groups * pts)
        .map(|i| {
            let n = i / pts;
            let p = i % pts;
            let c_base = &coords[n * 2 * pts..][..2 * pts];
            resolve_point(c_base[p], c_base[pts + p], h, w)
        })
        .collect();
    let one = E::ONE;
    for_each_chunk(dx, h * w, |plane_idx, dxp| {
        let b = plane_idx / channels;
        let c = plane_idx % channels;
        for g in 0..groups {
            let n = b * groups + g;
            let g_plane = &gout[(n * channels + c) * pts..][..pts];
            let info = &infos[n * pts..][..pts];
            for (gv, p) in g_plane.iter().zip(info) {
                let gv = *gv;
                dxp[p.r0 * w + p.c0] += gv * (one - p.fr) * (one - p.fc);
                dxp[p.r0 * w + p.c1] += gv * (one - p.fr) * p.fc;
                dxp[p.r1 * w + p.c0] += gv * p.fr * (one - p.fc);
                dxp[p.r1 * w + p.c1] += gv * p.fr * p.fc;
            }
        }
    });
}

/// Accumulate gradient wrt the coordinates themselves.
pub fn bilinear_bwd_coords<E: Element>(
    gout: &[E],
    x: &[E],
    coords: &[E],
    dcoords: &mut [E],
    batch: usize,
    groups: usize,
    channels: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) {
    let _ = batch;
    let pts = out_h * out_w;
    let one = E::ONE;
    for_each_chunk(dcoords, 2 * pts, |n, dc| {
        let b = n / groups;
        let c_base = &coords[n * 2 * pts..][..2 * pts];
        for i in 0..pts {
            let p = resolve_point(c_base[i], c_base[pts + i], h, w);
            let mut dr = E::ZERO;
            let mut dcc = E::ZERO;
            for c in 0..channels {
                let x_plane = &x[(b * channels + c) * h * w..][..h * w];
                let gv = gout[(n * channels + c) * pts + i];
                let v00 = x_plane[p.r0 * w + p.c0];
                let v01 = x_plane[p.r0 * w + p.c1];
                let v10 = x_plane[p.r1 * w + p.c0];
                let v11 = x_plane[p.r1 * w + p.c1];
                dr += gv * ((one - p.fc) * (v10 - v00) + p.fc * (v11 - v01));
                dcc += gv * ((one - p.fr) * (v01 - v00) + p.fr * (v11 - v10));
            }
            if p.dr_live {
                dc[i] += dr;
            }
            if p.dc_live {
                dc[pts + i] += dcc;
            }
        }
    });
}

/// One axis of a separable resize: (lo index, hi index, fraction).
pub fn resize_axis<E: Element>(n_in: usize, n_out: usize) -> Vec<(usize, usize, E)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let mut i0 = src.floor() as usize;
            if i0 >= n_in - 1 {
                i0 = n_in - 1;
            }
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, E::from_f64(src - i0 as f64))
        })
        .collect()
}

pub fn resize_bilinear_fwd<E: Element>(
    x: &[E],
    out: &mut [E],
    planes: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) {
    let rows = resize_axis::<E>(in_h, out_h);
    let cols = resize_axis::<E>(in_w, out_w);
    let one = E::ONE;
    for_each_chunk(out, out_h * out_w, |pl, o| {
        let xp = &x[pl * in_h * in_w..][..in_h * in_w];
        for (oh, &(r0, r1, fr)) in rows.iter().enumerate() {
            let row0 = &xp[r0 * in_w..][..in_w];
            let row1 = &xp[r1 * in_w..][..in_w];
            let o_row = &mut o[oh * out_w..][..out_w];
            for (ov, &(c0, c1, fc)) in o_row.iter_mut().zip(&cols) {
                let top = (one - fc) * row0[c0] + fc * row0[c1];
                let bot = (one - fc) * row1[c0] + fc * row1[c1];
                *ov = (one - fr) * top + fr * bot;
            }
        }
    });
    let _ = planes;
}

pub fn resize_bilinear_bwd<E: Element>(
    gout: &[E],
    dx: &mut [E],
    planes: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) {
    let rows = resize_axis::<E>(in_h, out_h);
    let cols = resize_axis::<E>(in_w, out_w);
    let one = E::ONE;
    for_each_chunk(dx, in_h * in_w, |pl, dxp| {
        let gp = &gout[pl * out_h * out_w..][..out_h * out_w];
        for (oh, &(r0, r1, fr)) in rows.iter().enumerate() {
            let g_row = &gp[oh * out_w..][..out_w];
            for (&gv, &(c0, c1, fc)) in g_row.iter().zip(&cols) {
                dxp[r0 * in_w + c0] += gv * (one - fr) * (one - fc);
                dxp[r0 * in_w + c1] += gv * (one - fr) * fc;
                dxp[r1 * in_w + c0] += gv * fr * (one - fc);
                dxp[r1 * in_w + c1] += gv * fr * fc;
            }
        }
    });
    let _ = planes;
}
