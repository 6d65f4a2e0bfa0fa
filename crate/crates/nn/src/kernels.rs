//! Inner loops for matmul and convolutions. All parallelism is data-parallel
//! over disjoint output (or input-gradient) slices, so results are bitwise
//! identical for any thread count.

use rayon::prelude::*;

use crate::tensor::Element;

/// Work size above which rayon is worth the overhead.
const PAR_THRESHOLD: usize = 1 << 16;

/// Batched matmul: logical `a` is `[batch, m, k]`, logical `b` is `[batch, k, n]`.
/// `ta`/`tb` mark operands stored transposed in their last two axes.
pub fn bmm<T: Element>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * n];
    let row = |out_row: &mut [T], bi: usize, i: usize| {
        let a_base = bi * m * k;
        let b_base = bi * k * n;
        if !tb {
            for kk in 0..k {
                let av = if ta { a[a_base + kk * m + i] } else { a[a_base + i * k + kk] };
                if av != T::zero() {
                    let brow = &b[b_base + kk * n..b_base + kk * n + n];
                    for (o, &bv) in out_row.iter_mut().zip(brow) {
                        *o = *o + av * bv;
                    }
                }
            }
        } else {
            for (j, o) in out_row.iter_mut().enumerate() {
                let mut acc = T::zero();
                for kk in 0..k {
                    let av = if ta { a[a_base + kk * m + i] } else { a[a_base + i * k + kk] };
                    acc = acc + av * b[b_base + j * k + kk];
                }
                *o = acc;
            }
        }
    };
    if batch * m * n * k >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(r, out_row)| row(out_row, r / m, r % m));
    } else {
        for (r, out_row) in out.chunks_mut(n).enumerate() {
            row(out_row, r / m, r % m);
        }
    }
    out
}

/// Geometry of one convolution call. `pad` is per spatial axis.
pub struct ConvDims {
    pub in_ch: usize,
    pub out_ch: usize,
    pub spatial_in: [usize; 3],
    pub spatial_out: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: usize,
    pub pad: [usize; 3],
}

pub fn conv_out_dim(inp: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = inp + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// 3-D convolution forward, input `[Cin, D, H, W]`, weight `[Cout, Cin, kd, kh, kw]`.
/// 2-D convolutions reuse this with a unit depth axis (kd = 1, pad_d = 0).
pub fn conv3d_forward<T: Element>(x: &[T], w: &[T], b: Option<&[T]>, d: &ConvDims) -> Vec<T> {
    let [id, ih, iw] = d.spatial_in;
    let [od, oh, ow] = d.spatial_out;
    let [kd, kh, kw] = d.kernel;
    let out_plane = od * oh * ow;
    let mut out = vec![T::zero(); d.out_ch * out_plane];
    let work = d.out_ch * out_plane * d.in_ch * kd * kh * kw;
    let one_oc = |oc: usize, out_oc: &mut [T]| {
        if let Some(bias) = b {
            out_oc.fill(bias[oc]);
        }
        for ic in 0..d.in_ch {
            let x_ic = &x[ic * id * ih * iw..(ic + 1) * id * ih * iw];
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w[(((oc * d.in_ch + ic) * kd + kz) * kh + ky) * kw + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        for oz in 0..od {
                            let iz = (oz * d.stride + kz) as isize - d.pad[0] as isize;
                            if iz < 0 || iz as usize >= id {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * d.stride + ky) as isize - d.pad[1] as isize;
                                if iy < 0 || iy as usize >= ih {
                                    continue;
                                }
                                let x_row = (iz as usize * ih + iy as usize) * iw;
                                let o_row = (oz * oh + oy) * ow;
                                for ox in 0..ow {
                                    let ixx = (ox * d.stride + kx) as isize - d.pad[2] as isize;
                                    if ixx < 0 || ixx as usize >= iw {
                                        continue;
                                    }
                                    out_oc[o_row + ox] =
                                        out_oc[o_row + ox] + wv * x_ic[x_row + ixx as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    };
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(out_plane).enumerate().for_each(|(oc, s)| one_oc(oc, s));
    } else {
        for (oc, s) in out.chunks_mut(out_plane).enumerate() {
            one_oc(oc, s);
        }
    }
    out
}

/// Gradients for conv3d. Returns `(dx, dw, db)`; `db` only when bias present.
pub fn conv3d_backward<T: Element>(
    x: &[T],
    w: &[T],
    gout: &[T],
    has_bias: bool,
    d: &ConvDims,
) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    let [id, ih, iw] = d.spatial_in;
    let [od, oh, ow] = d.spatial_out;
    let [kd, kh, kw] = d.kernel;
    let in_plane = id * ih * iw;
    let out_plane = od * oh * ow;
    let kvol = kd * kh * kw;
    let work = d.out_ch * out_plane * d.in_ch * kvol;

    // dx: each input-channel plane is owned by one task.
    let mut dx = vec![T::zero(); d.in_ch * in_plane];
    let one_ic = |ic: usize, dx_ic: &mut [T]| {
        for oc in 0..d.out_ch {
            let g_oc = &gout[oc * out_plane..(oc + 1) * out_plane];
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w[(oc * d.in_ch + ic) * kvol + (kz * kh + ky) * kw + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        for oz in 0..od {
                            let iz = (oz * d.stride + kz) as isize - d.pad[0] as isize;
                            if iz < 0 || iz as usize >= id {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * d.stride + ky) as isize - d.pad[1] as isize;
                                if iy < 0 || iy as usize >= ih {
                                    continue;
                                }
                                let x_row = (iz as usize * ih + iy as usize) * iw;
                                let o_row = (oz * oh + oy) * ow;
                                for ox in 0..ow {
                                    let ixx = (ox * d.stride + kx) as isize - d.pad[2] as isize;
                                    if ixx < 0 || ixx as usize >= iw {
                                        continue;
                                    }
                                    dx_ic[x_row + ixx as usize] =
                                        dx_ic[x_row + ixx as usize] + wv * g_oc[o_row + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    };
    if work >= PAR_THRESHOLD {
        dx.par_chunks_mut(in_plane).enumerate().for_each(|(ic, s)| one_ic(ic, s));
    } else {
        for (ic, s) in dx.chunks_mut(in_plane).enumerate() {
            one_ic(ic, s);
        }
    }

    // dw: each output-channel slab owned by one task.
    let mut dw = vec![T::zero(); d.out_ch * d.in_ch * kvol];
    let one_oc_w = |oc: usize, dw_oc: &mut [T]| {
        let g_oc = &gout[oc * out_plane..(oc + 1) * out_plane];
        for ic in 0..d.in_ch {
            let x_ic = &x[ic * in_plane..(ic + 1) * in_plane];
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = T::zero();
                        for oz in 0..od {
                            let iz = (oz * d.stride + kz) as isize - d.pad[0] as isize;
                            if iz < 0 || iz as usize >= id {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * d.stride + ky) as isize - d.pad[1] as isize;
                                if iy < 0 || iy as usize >= ih {
                                    continue;
                                }
                                let x_row = (iz as usize * ih + iy as usize) * iw;
                                let o_row = (oz * oh + oy) * ow;
                                for ox in 0..ow {
                                    let ixx = (ox * d.stride + kx) as isize - d.pad[2] as isize;
                                    if ixx < 0 || ixx as usize >= iw {
                                        continue;
                                    }
                                    acc = acc + x_ic[x_row + ixx as usize] * g_oc[o_row + ox];
                                }
                            }
                        }
                        dw_oc[ic * kvol + (kz * kh + ky) * kw + kx] = acc;
                    }
                }
            }
        }
    };
    if work >= PAR_THRESHOLD {
        dw.par_chunks_mut(d.in_ch * kvol).enumerate().for_each(|(oc, s)| one_oc_w(oc, s));
    } else {
        for (oc, s) in dw.chunks_mut(d.in_ch * kvol).enumerate() {
            one_oc_w(oc, s);
        }
    }

    let db = has_bias.then(|| {
        (0..d.out_ch)
            .map(|oc| {
                let mut acc = T::zero();
                for v in &gout[oc * out_plane..(oc + 1) * out_plane] {
                    acc = acc + *v;
                }
                acc
            })
            .collect()
    });

    (dx, dw, db)
}
