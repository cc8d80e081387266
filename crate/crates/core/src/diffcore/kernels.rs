//! Forward/backward kernels shared by the tape and by value-level helpers.

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
pub(crate) fn matmul_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
pub(crate) fn matmul_at_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Source taps for one axis of an align-corners-false bilinear resize.
#[derive(Clone, Debug)]
pub(crate) struct Taps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

pub(crate) fn bilinear_taps(input: usize, output: usize) -> Taps {
    let scale = input as f64 / output as f64;
    let mut taps = Taps {
        lo: Vec::with_capacity(output),
        hi: Vec::with_capacity(output),
        frac: Vec::with_capacity(output),
    };
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(input - 1);
        let hi = (lo + 1).min(input - 1);
        let frac = if hi == lo { 0.0 } else { src - lo as f64 };
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.frac.push(frac);
    }
    taps
}

pub(crate) fn resize_forward(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    if h == oh && w == ow {
        return x.to_vec();
    }
    let rt = bilinear_taps(h, oh);
    let ct = bilinear_taps(w, ow);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for r in 0..oh {
            let (r0, r1, fr) = (rt.lo[r], rt.hi[r], rt.frac[r]);
            let row0 = &src[r0 * w..(r0 + 1) * w];
            let row1 = &src[r1 * w..(r1 + 1) * w];
            for col in 0..ow {
                let (c0, c1, fc) = (ct.lo[col], ct.hi[col], ct.frac[col]);
                let top = row0[c0] * (1.0 - fc) + row0[c1] * fc;
                let bot = row1[c0] * (1.0 - fc) + row1[c1] * fc;
                dst[r * ow + col] = top * (1.0 - fr) + bot * fr;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn resize_backward(
    g: &[f64],
    gx: &mut [f64],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) {
    if h == oh && w == ow {
        for (a, b) in gx.iter_mut().zip(g) {
            *a += b;
        }
        return;
    }
    let rt = bilinear_taps(h, oh);
    let ct = bilinear_taps(w, ow);
    for ch in 0..c {
        let src = &mut gx[ch * h * w..(ch + 1) * h * w];
        let gg = &g[ch * oh * ow..(ch + 1) * oh * ow];
        for r in 0..oh {
            let (r0, r1, fr) = (rt.lo[r], rt.hi[r], rt.frac[r]);
            for col in 0..ow {
                let (c0, c1, fc) = (ct.lo[col], ct.hi[col], ct.frac[col]);
                let v = gg[r * ow + col];
                src[r0 * w + c0] += v * (1.0 - fr) * (1.0 - fc);
                src[r0 * w + c1] += v * (1.0 - fr) * fc;
                src[r1 * w + c0] += v * fr * (1.0 - fc);
                src[r1 * w + c1] += v * fr * fc;
            }
        }
    }
}

pub(crate) fn box_down_forward(x: &[f64], c: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h / f, w / f);
    let inv = 1.0 / (f * f) as f64;
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for r in 0..h {
            let orow = (ch * oh + r / f) * ow;
            let irow = (ch * h + r) * w;
            for col in 0..w {
                out[orow + col / f] += x[irow + col];
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

pub(crate) fn box_down_backward(g: &[f64], gx: &mut [f64], c: usize, h: usize, w: usize, f: usize) {
    let (oh, ow) = (h / f, w / f);
    let inv = 1.0 / (f * f) as f64;
    for ch in 0..c {
        for r in 0..h {
            let orow = (ch * oh + r / f) * ow;
            let irow = (ch * h + r) * w;
            for col in 0..w {
                gx[irow + col] += g[orow + col / f] * inv;
            }
        }
    }
}

/// Zero-padded 3×3 convolution, stride 1. `wt` is `[cout, cin, 3, 3]`.
pub(crate) fn conv3x3_forward(
    x: &[f64],
    wt: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; cout * plane];
    for o in 0..cout {
        let dst = &mut out[o * plane..(o + 1) * plane];
        for i in 0..cin {
            let src = &x[i * plane..(i + 1) * plane];
            for dr in 0..3 {
                for dc in 0..3 {
                    let k = wt[((o * cin + i) * 3 + dr) * 3 + dc];
                    let (r_lo, r_hi) = valid_range(h, dr);
                    let (c_lo, c_hi) = valid_range(w, dc);
                    for r in r_lo..r_hi {
                        let sr = r + dr - 1;
                        let drow = &mut dst[r * w + c_lo..r * w + c_hi];
                        let srow = &src[sr * w + c_lo + dc - 1..sr * w + c_hi + dc - 1];
                        for (d, s) in drow.iter_mut().zip(srow) {
                            *d += k * s;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_backward(
    g: &[f64],
    x: &[f64],
    wt: &[f64],
    gx: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) {
    let plane = h * w;
    if let Some(gx) = gx {
        for o in 0..cout {
            let gg = &g[o * plane..(o + 1) * plane];
            for i in 0..cin {
                let dst = &mut gx[i * plane..(i + 1) * plane];
                for dr in 0..3 {
                    for dc in 0..3 {
                        let k = wt[((o * cin + i) * 3 + dr) * 3 + dc];
                        let (r_lo, r_hi) = valid_range(h, dr);
                        let (c_lo, c_hi) = valid_range(w, dc);
                        for r in r_lo..r_hi {
                            let sr = r + dr - 1;
                            let grow = &gg[r * w + c_lo..r * w + c_hi];
                            let drow = &mut dst[sr * w + c_lo + dc - 1..sr * w + c_hi + dc - 1];
                            for (d, s) in drow.iter_mut().zip(grow) {
                                *d += k * s;
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(gw) = gw {
        for o in 0..cout {
            let gg = &g[o * plane..(o + 1) * plane];
            for i in 0..cin {
                let src = &x[i * plane..(i + 1) * plane];
                for dr in 0..3 {
                    for dc in 0..3 {
                        let (r_lo, r_hi) = valid_range(h, dr);
                        let (c_lo, c_hi) = valid_range(w, dc);
                        let mut acc = 0.0;
                        for r in r_lo..r_hi {
                            let sr = r + dr - 1;
                            let grow = &gg[r * w + c_lo..r * w + c_hi];
                            let srow = &src[sr * w + c_lo + dc - 1..sr * w + c_hi + dc - 1];
                            acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                        }
                        gw[((o * cin + i) * 3 + dr) * 3 + dc] += acc;
                    }
                }
            }
        }
    }
}

/// Output positions `p` along an axis of length `n` for which `p + d - 1` is in bounds.
#[inline]
fn valid_range(n: usize, d: usize) -> (usize, usize) {
    match d {
        0 => (1.min(n), n),
        1 => (0, n),
        _ => (0, n.saturating_sub(1)),
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Knee half-width of [`smooth_leaky`].
pub(crate) const KNEE: f64 = 0.5;

#[inline]
pub(crate) fn smooth_leaky(x: f64, slope: f64) -> f64 {
    slope * x + (1.0 - slope) * 0.5 * (x + (x * x + KNEE * KNEE).sqrt())
}

#[inline]
pub(crate) fn smooth_leaky_grad(x: f64, slope: f64) -> f64 {
    slope + (1.0 - slope) * 0.5 * (1.0 + x / (x * x + KNEE * KNEE).sqrt())
}

#[inline]
pub(crate) fn squash(x: f64) -> f64 {
    0.5 + 0.5 * x / (1.0 + x * x).sqrt()
}

#[inline]
pub(crate) fn squash_grad(x: f64) -> f64 {
    let r = 1.0 + x * x;
    0.5 / (r * r.sqrt())
}
