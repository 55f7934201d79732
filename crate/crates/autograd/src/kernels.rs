//! Forward and backward kernels on raw buffers. Everything here is batch-major
//! NCHW and single-threaded.

/// Matrix view descriptor: row-major `rows x cols` or its transpose.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// The transpose of a stored row-major `rows x cols` buffer.
    pub fn t(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows: cols,
            cols: rows,
            transposed: true,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a * b + beta * c` with `c` row-major `a.rows x b.cols`.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, c: &mut [f64], beta: f64) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert!(a.data.len() >= a.rows * a.cols && b.data.len() >= b.rows * b.cols);
    assert_eq!(c.len(), a.rows * b.cols);
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    if a.cols == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: bounds are asserted above; strides describe the stored layouts.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    pub fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn patches(&self) -> usize {
        self.ho * self.wo
    }

}

/// Patch matrix of a whole batch, `[cin * k * k][n * patches]`, with
/// image `b` in columns `b * patches..(b + 1) * patches`.
pub(crate) fn im2col(g: &ConvGeom, input: &[f64], n: usize) -> Vec<f64> {
    let plane = g.h * g.w;
    let mut cols = Vec::with_capacity(g.rows() * n * g.patches());
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let (lo, hi) = valid_range(g, kx);
                for b in 0..n {
                    let src = &input[(b * g.cin + ci) * plane..(b * g.cin + ci + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize || lo == hi {
                            cols.resize(cols.len() + g.wo, 0.0);
                            continue;
                        }
                        let first = iy as usize * g.w + lo * g.stride + kx - g.pad;
                        cols.resize(cols.len() + lo, 0.0);
                        if g.stride == 1 {
                            cols.extend_from_slice(&src[first..first + hi - lo]);
                        } else {
                            cols.extend(src[first..].iter().step_by(g.stride).take(hi - lo));
                        }
                        cols.resize(cols.len() + g.wo - hi, 0.0);
                    }
                }
            }
        }
    }
    cols
}

/// Output columns `lo..hi` whose input column for kernel offset `kx` lies
/// inside the image.
fn valid_range(g: &ConvGeom, kx: usize) -> (usize, usize) {
    // ix = ox * stride + kx - pad must satisfy 0 <= ix < w.
    let lo = if kx >= g.pad { 0 } else { (g.pad - kx).div_ceil(g.stride) };
    let hi = if g.w + g.pad > kx { ((g.w + g.pad - kx - 1) / g.stride + 1).min(g.wo) } else { 0 };
    (lo.min(hi), hi)
}

/// Adjoint of [`im2col`]: accumulates one image's columns into its input
/// gradient.
pub(crate) fn col2im_add(g: &ConvGeom, cols: &[f64], ld: usize, off: usize, grad_in: &mut [f64]) {
    for ci in 0..g.cin {
        let plane = &mut grad_in[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * ld + off..];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = valid_range(g, kx);
                    if lo < hi {
                        let first = lo * g.stride + kx - g.pad;
                        let row = &src[oy * g.wo + lo..oy * g.wo + hi];
                        for (d, s) in dst[first..].iter_mut().step_by(g.stride).zip(row) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
}

/// `[n][c][p]` to `[c][n * p]`.
pub(crate) fn to_channel_major(x: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for ch in 0..c {
        for b in 0..n {
            out.extend_from_slice(&x[(b * c + ch) * p..(b * c + ch + 1) * p]);
        }
    }
    out
}

/// `[c][n * p]` to `[n][c][p]`.
pub(crate) fn from_channel_major(x: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for b in 0..n {
        for ch in 0..c {
            out.extend_from_slice(&x[ch * n * p + b * p..ch * n * p + (b + 1) * p]);
        }
    }
    out
}

/// Group-norm statistics for one `(n, group)` slice.
pub(crate) fn group_norm_forward(
    x: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    out: &mut [f64],
    mean: &mut [f64],
    rstd: &mut [f64],
) {
    let cpg = c / groups;
    let m = (cpg * hw) as f64;
    for b in 0..n {
        for g in 0..groups {
            let start = (b * c + g * cpg) * hw;
            let slice = &x[start..start + cpg * hw];
            let mu = slice.iter().sum::<f64>() / m;
            let var = slice.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
            let rs = 1.0 / (var + eps).sqrt();
            mean[b * groups + g] = mu;
            rstd[b * groups + g] = rs;
            for ch in 0..cpg {
                let cc = g * cpg + ch;
                let off = start + ch * hw;
                for i in 0..hw {
                    out[off + i] = (x[off + i] - mu) * rs * gamma[cc] + beta[cc];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward(
    x: &[f64],
    dy: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    gamma: &[f64],
    mean: &[f64],
    rstd: &[f64],
    dx: Option<&mut [f64]>,
    dgamma: Option<&mut [f64]>,
    dbeta: Option<&mut [f64]>,
) {
    let cpg = c / groups;
    let m = (cpg * hw) as f64;
    let mut dgamma = dgamma;
    let mut dbeta = dbeta;
    let mut dx = dx;
    for b in 0..n {
        for g in 0..groups {
            let mu = mean[b * groups + g];
            let rs = rstd[b * groups + g];
            let start = (b * c + g * cpg) * hw;
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for ch in 0..cpg {
                let cc = g * cpg + ch;
                let off = start + ch * hw;
                let mut dg = 0.0;
                let mut db = 0.0;
                for i in 0..hw {
                    let xhat = (x[off + i] - mu) * rs;
                    let d = dy[off + i];
                    dg += d * xhat;
                    db += d;
                    let dxhat = d * gamma[cc];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                if let Some(dgm) = dgamma.as_deref_mut() {
                    dgm[cc] += dg;
                }
                if let Some(dbt) = dbeta.as_deref_mut() {
                    dbt[cc] += db;
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                for ch in 0..cpg {
                    let cc = g * cpg + ch;
                    let off = start + ch * hw;
                    for i in 0..hw {
                        let xhat = (x[off + i] - mu) * rs;
                        let dxhat = dy[off + i] * gamma[cc];
                        dx[off + i] +=
                            rs / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                    }
                }
            }
        }
    }
}

/// Source taps of bilinear resampling (half-pixel centers, edge clamped).
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

pub(crate) fn resize_forward(
    x: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
    out: &mut [f64],
) {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for (oy, a) in ty.iter().enumerate() {
            let r0 = &src[a.lo * w..(a.lo + 1) * w];
            let r1 = &src[a.hi * w..(a.hi + 1) * w];
            for (ox, b) in tx.iter().enumerate() {
                let top = r0[b.lo] * (1.0 - b.frac) + r0[b.hi] * b.frac;
                let bot = r1[b.lo] * (1.0 - b.frac) + r1[b.hi] * b.frac;
                dst[oy * wo + ox] = top * (1.0 - a.frac) + bot * a.frac;
            }
        }
    }
}

pub(crate) fn resize_backward(
    dy: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
    dx: &mut [f64],
) {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    for p in 0..planes {
        let src = &dy[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let g = src[oy * wo + ox];
                let top = g * (1.0 - a.frac);
                let bot = g * a.frac;
                dst[a.lo * w + b.lo] += top * (1.0 - b.frac);
                dst[a.lo * w + b.hi] += top * b.frac;
                dst[a.hi * w + b.lo] += bot * (1.0 - b.frac);
                dst[a.hi * w + b.hi] += bot * b.frac;
            }
        }
    }
}

/// 2x2 stride-2 max pooling with ceil-mode windows. Returns argmax indices
/// into each input plane.
pub(crate) fn maxpool2_forward(
    x: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    out: &mut [f64],
) -> Vec<usize> {
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut arg = vec![0; planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for iy in 2 * oy..(2 * oy + 2).min(h) {
                    for ix in 2 * ox..(2 * ox + 2).min(w) {
                        let v = src[iy * w + ix];
                        if v > best {
                            best = v;
                            best_i = iy * w + ix;
                        }
                    }
                }
                out[p * ho * wo + oy * wo + ox] = best;
                arg[p * ho * wo + oy * wo + ox] = best_i;
            }
        }
    }
    arg
}
