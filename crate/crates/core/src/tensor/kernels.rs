//! Slice-level kernels shared by the graph ops and the receiver filters.

use super::{gemm, Element, MatRef, Padding, PoolKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, padding: Padding) -> Option<Self> {
        if k == 0 || stride == 0 {
            return None;
        }
        let pad = match padding {
            Padding::Same if k % 2 == 1 => k / 2,
            Padding::Same => return None,
            Padding::Valid => 0,
        };
        if h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Some(ConvGeom { c, h, w, k, stride, pad, ho, wo })
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold one `c x h x w` sample into a `(c*k*k) x (ho*wo)` column matrix
/// with zero padding.
pub(crate) fn im2col<E: Element>(x: &[E], g: &ConvGeom, cols: &mut [E]) {
    let l = g.col_cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let out = &mut cols[row * l..(row + 1) * l];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut out[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.iter_mut().for_each(|v| *v = E::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            E::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image gradient.
pub(crate) fn col2im_add<E: Element>(cols: &[E], g: &ConvGeom, dx: &mut [E]) {
    let l = g.col_cols();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            plane[base + ix as usize] = plane[base + ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward over a batch. `weight` is `f x (c*k*k)` row-major.
pub(crate) fn conv2d_forward<E: Element>(
    x: &[E],
    n: usize,
    g: &ConvGeom,
    weight: &[E],
    f: usize,
    bias: Option<&[E]>,
    out: &mut [E],
) {
    let in_per = g.c * g.h * g.w;
    let out_per = f * g.col_cols();
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![E::zero(); g.col_rows() * g.col_cols()]
    };
    for s in 0..n {
        let xs = &x[s * in_per..(s + 1) * in_per];
        let os = &mut out[s * out_per..(s + 1) * out_per];
        match bias {
            Some(b) => {
                for (fi, chunk) in os.chunks_mut(g.col_cols()).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = b[fi]);
                }
            }
            None => os.iter_mut().for_each(|v| *v = E::zero()),
        }
        let colm = if g.is_pointwise() {
            MatRef::rm(xs, g.col_rows(), g.col_cols())
        } else {
            im2col(xs, g, &mut cols);
            MatRef::rm(&cols, g.col_rows(), g.col_cols())
        };
        gemm(MatRef::rm(weight, f, g.col_rows()), colm, E::one(), os);
    }
}

/// Accumulates convolution gradients into whichever of `dx`, `dw`, `db` are given.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<E: Element>(
    x: &[E],
    n: usize,
    g: &ConvGeom,
    weight: &[E],
    f: usize,
    dout: &[E],
    mut dx: Option<&mut [E]>,
    mut dw: Option<&mut [E]>,
    mut db: Option<&mut [E]>,
) {
    let in_per = g.c * g.h * g.w;
    let l = g.col_cols();
    let out_per = f * l;
    let rows = g.col_rows();
    let mut cols = vec![E::zero(); rows * l];
    let mut dcols = vec![E::zero(); rows * l];
    for s in 0..n {
        let xs = &x[s * in_per..(s + 1) * in_per];
        let ds = &dout[s * out_per..(s + 1) * out_per];
        if let Some(db) = db.as_deref_mut() {
            for (fi, chunk) in ds.chunks(l).enumerate() {
                db[fi] = db[fi] + chunk.iter().copied().sum();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let colm = if g.is_pointwise() {
                MatRef::rm(xs, rows, l)
            } else {
                im2col(xs, g, &mut cols);
                MatRef::rm(&cols, rows, l)
            };
            gemm(MatRef::rm(ds, f, l), colm.t(), E::one(), dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxs = &mut dx[s * in_per..(s + 1) * in_per];
            if g.is_pointwise() {
                gemm(MatRef::rm(weight, f, rows).t(), MatRef::rm(ds, f, l), E::one(), dxs);
            } else {
                gemm(MatRef::rm(weight, f, rows).t(), MatRef::rm(ds, f, l), E::zero(), &mut dcols);
                col2im_add(&dcols, g, dxs);
            }
        }
    }
}

/// Per-(sample, group) normalization. Returns `(mean, rstd)` per group.
pub(crate) fn group_norm_forward<E: Element>(
    x: &[E],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    eps: E,
    out: &mut [E],
) -> (Vec<E>, Vec<E>) {
    let gsize = c / groups * hw;
    let mut means = Vec::with_capacity(n * groups);
    let mut rstds = Vec::with_capacity(n * groups);
    let inv = E::one() / E::lit(gsize as f64);
    for (xs, os) in x.chunks(gsize).zip(out.chunks_mut(gsize)) {
        let mean = xs.iter().copied().sum::<E>() * inv;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() * inv;
        let rstd = E::one() / (var + eps).sqrt();
        for (o, &v) in os.iter_mut().zip(xs) {
            *o = (v - mean) * rstd;
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (means, rstds)
}

pub(crate) fn group_norm_backward<E: Element>(
    x: &[E],
    gsize: usize,
    means: &[E],
    rstds: &[E],
    dout: &[E],
    dx: &mut [E],
) {
    let inv = E::one() / E::lit(gsize as f64);
    for (gi, ((xs, ds), dxs)) in x
        .chunks(gsize)
        .zip(dout.chunks(gsize))
        .zip(dx.chunks_mut(gsize))
        .enumerate()
    {
        let (mean, rstd) = (means[gi], rstds[gi]);
        let mut sum_d = E::zero();
        let mut sum_dx = E::zero();
        for (&v, &d) in xs.iter().zip(ds) {
            sum_d = sum_d + d;
            sum_dx = sum_dx + d * (v - mean) * rstd;
        }
        let mean_d = sum_d * inv;
        let mean_dx = sum_dx * inv;
        for ((o, &v), &d) in dxs.iter_mut().zip(xs).zip(ds) {
            let xhat = (v - mean) * rstd;
            *o = *o + rstd * (d - mean_d - xhat * mean_dx);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl PoolGeom {
    pub fn new(h: usize, w: usize, k: usize, stride: usize, padding: Padding) -> Option<Self> {
        let g = ConvGeom::new(1, h, w, k, stride, padding)?;
        Some(PoolGeom { h, w, k, stride, pad: g.pad, ho: g.ho, wo: g.wo })
    }

    /// Input index read by window element `(ky, kx)` of output `(oy, ox)`,
    /// with edge replication outside the plane.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> usize {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        let iy = iy.clamp(0, self.h as isize - 1) as usize;
        let ix = ix.clamp(0, self.w as isize - 1) as usize;
        iy * self.w + ix
    }
}

/// Pools every plane of `x` (planes of `h x w`). For max pooling the chosen
/// source index per output is recorded in `argmax`.
pub(crate) fn pool2d_forward<E: Element>(
    x: &[E],
    planes: usize,
    g: &PoolGeom,
    kind: PoolKind,
    out: &mut [E],
    mut argmax: Option<&mut Vec<usize>>,
) {
    let inv = E::one() / E::lit((g.k * g.k) as f64);
    for p in 0..planes {
        let xs = &x[p * g.h * g.w..(p + 1) * g.h * g.w];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let o = p * g.ho * g.wo + oy * g.wo + ox;
                match kind {
                    PoolKind::Avg => {
                        let mut acc = E::zero();
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                acc = acc + xs[g.source(oy, ox, ky, kx)];
                            }
                        }
                        out[o] = acc * inv;
                    }
                    PoolKind::Max => {
                        let mut best = g.source(oy, ox, 0, 0);
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let s = g.source(oy, ox, ky, kx);
                                // strict comparison keeps the first index on ties
                                if xs[s] > xs[best] {
                                    best = s;
                                }
                            }
                        }
                        out[o] = xs[best];
                        if let Some(am) = argmax.as_deref_mut() {
                            am.push(p * g.h * g.w + best);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn pool2d_backward<E: Element>(
    planes: usize,
    g: &PoolGeom,
    kind: PoolKind,
    argmax: &[usize],
    dout: &[E],
    dx: &mut [E],
) {
    match kind {
        PoolKind::Avg => {
            let inv = E::one() / E::lit((g.k * g.k) as f64);
            for p in 0..planes {
                let base = p * g.h * g.w;
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let d = dout[p * g.ho * g.wo + oy * g.wo + ox] * inv;
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let s = base + g.source(oy, ox, ky, kx);
                                dx[s] = dx[s] + d;
                            }
                        }
                    }
                }
            }
        }
        PoolKind::Max => {
            for (o, &s) in argmax.iter().enumerate() {
                dx[s] = dx[s] + dout[o];
            }
        }
    }
}
